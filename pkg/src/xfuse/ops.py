"""Differentiable tensor operations.

Each op computes its forward value with numpy and registers a backward rule
through :func:`xfuse.tensor.make_result`. Leading batch dimensions are
supported throughout; broadcasting is limited to bias/mask-style addition
of a trailing-aligned operand.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError, ValidationError
from .tensor import Tensor, as_tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return make_result(np.where(pos, x.data, 0.0), (x,), bw, "relu")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), bw, "gelu")


def sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (x,), bw, "sigmoid")


# ------------------------------------------------------------------ reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), bw, "mean")


# -------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw, "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def roll(x: Tensor, shift: Sequence[int], axis: Sequence[int]) -> Tensor:
    shift, axis = tuple(shift), tuple(axis)

    def bw(g):
        return (np.roll(g, tuple(-s for s in shift), axis),)

    return make_result(np.roll(x.data, shift, axis), (x,), bw, "roll")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


# ----------------------------------------------------------------- linear alg


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be a shared 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gain, bias), bw, "layer_norm")


# ----------------------------------------------------------------- image ops


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, False


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding="same") -> Tensor:
    """Stride-1 2-D cross-correlation.

    ``x`` is [C_in,H,W] or [N,C_in,H,W]; ``w`` is [C_out,C_in,kh,kw].
    ``padding`` is an int (zero padding on every side) or ``"same"`` for odd
    kernels.
    """
    xb, squeeze = _as_batched(as_tensor(x))
    co, ci, kh, kw = w.shape
    if xb.shape[1] != ci:
        raise ShapeError(f"conv2d: input channels {xb.shape[1]} != weight channels {ci} (x {xb.shape}, w {w.shape})")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d: 'same' padding needs odd kernel sizes")
        ph, pw = kh // 2, kw // 2
    else:
        ph = pw = int(padding)
    n, _, h, wd = xb.shape
    hp, wp = h + 2 * ph, wd + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(xb.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else np.ascontiguousarray(xb.data)
    cols = kernels.im2col(xp, kh, kw)  # ci*kh*kw, n*ho*wo
    ho, wo = hp - kh + 1, wp - kw + 1
    wmat = w.data.reshape(co, -1)
    out2 = wmat @ cols
    if b is not None:
        out2 += b.data[:, None]
    out = np.ascontiguousarray(out2.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        gw = (g2 @ cols.T).reshape(w.shape)
        gxp = kernels.col2im(wmat.T @ g2, (n, ci, hp, wp), kh, kw)
        grads = [np.ascontiguousarray(gxp[:, :, ph : ph + h, pw : pw + wd]), gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return grads

    parents = (xb, w) if b is None else (xb, w, b)
    res = make_result(out, parents, bw, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """Replicate each pixel of the last two axes into a 2x2 block."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def bw(g):
        return (g.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return make_result(out, (x,), bw, "upsample2x")


def avg_pool_2x(x: Tensor) -> Tensor:
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool_2x needs even spatial dims, got {x.shape}")
    out = x.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return make_result(out, (x,), bw, "avgpool2x")


# ------------------------------------------------------------- regularization


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity (the same object) in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= p
    scale = keep / (1.0 - p)

    def bw(g):
        return (g * scale,)

    return make_result(x.data * scale, (x,), bw, "dropout")


# ----------------------------------------------------------------------- loss


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean of max(x,0) - x*y + log(1 + exp(-|x|)) over all elements."""
    logits = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("bce_with_logits: targets must be 0 or 1")
    x = logits.data
    n = x.size
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = np.asarray(per.sum() / n)

    def bw(g):
        return (g * (sigmoid_np(x) - y) / n,)

    return make_result(loss, (logits,), bw, "bce_with_logits")
