"""Patch embedding, (shifted) window attention, patch merging and cross-attention.

Token sequences are laid out as ``[..., L, C]`` with ``L = H * W`` in raster
order. Parameters live in flat ``dict[str, Tensor]`` tables; block-level
functions take the table plus a name prefix.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor, as_tensor

MASK_NEG = -1e9


class AttentionParams(NamedTuple):
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    heads: int

    @classmethod
    def from_table(cls, params: Mapping[str, Tensor], prefix: str, heads: int) -> "AttentionParams":
        p = cls(params[prefix + "w_q"], params[prefix + "w_k"], params[prefix + "w_v"], params[prefix + "w_out"], heads)
        p.validate()
        return p

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def validate(self) -> None:
        d = self.d_model
        for name, w in zip(("w_q", "w_k", "w_v", "w_out"), self[:4]):
            if w.shape != (d, d):
                raise ShapeError(f"{name} must be square [{d},{d}], got {w.shape}")
        if self.heads < 1 or d % self.heads:
            raise ShapeError(f"d_model {d} not divisible by head count {self.heads}")


@dataclass(frozen=True)
class WindowLayout:
    height: int
    width: int
    window: int
    shift: int = 0

    def __post_init__(self):
        w = self.window
        if w < 1 or self.height % w or self.width % w:
            raise ShapeError(f"grid {self.height}x{self.width} not divisible by window {w}")
        if not 0 <= self.shift < w:
            raise ShapeError(f"shift {self.shift} must lie in [0, {w})")

    @property
    def n_windows(self) -> int:
        return (self.height // self.window) * (self.width // self.window)

    @classmethod
    def fitted(cls, height: int, width: int, window: int, shifted: bool) -> "WindowLayout":
        """Layout for a stage; the window shrinks to the grid (and shifting stops) on small grids."""
        if min(height, width) <= window:
            return cls(height, width, min(height, width), 0)
        return cls(height, width, window, window // 2 if shifted else 0)


# ------------------------------------------------------------------ patches


def patch_embed(img, patch: int, w_e: Tensor, b_e: Tensor | None = None) -> Tensor:
    """[.., C, H, W] image -> [.., (H/p)(W/p), d] tokens (patches flattened C-major)."""
    img = as_tensor(img)
    *lead, c, h, w = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    if w_e.shape[0] != c * patch * patch:
        raise ShapeError(f"patch weight rows {w_e.shape[0]} != C*p*p = {c * patch * patch}")
    gh, gw = h // patch, w // patch
    nl = len(lead)
    x = ops.reshape(img, (*lead, c, gh, patch, gw, patch))
    # -> lead, gh, gw, c, p, p
    x = ops.transpose(x, (*range(nl), nl + 1, nl + 3, nl, nl + 2, nl + 4))
    x = ops.reshape(x, (*lead, gh * gw, c * patch * patch))
    return ops.linear(x, w_e, b_e)


def gather_2x2(x: Tensor, height: int, width: int) -> Tensor:
    """[.., H*W, C] -> [.., (H/2)(W/2), 4C], neighbour order (0,0), (1,0), (0,1), (1,1)."""
    *lead, n_tok, c = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"patch_merge needs even grid dims, got {height}x{width}")
    if n_tok != height * width:
        raise ShapeError(f"token count {n_tok} != {height}x{width}")
    nl = len(lead)
    t = ops.reshape(x, (*lead, height // 2, 2, width // 2, 2, c))
    t = ops.transpose(t, (*range(nl), nl, nl + 2, nl + 3, nl + 1, nl + 4))
    return ops.reshape(t, (*lead, (height // 2) * (width // 2), 4 * c))


def patch_merge(x: Tensor, height: int, width: int, w_m: Tensor) -> Tensor:
    """Concatenate each 2x2 token neighbourhood (4C) and project to 2C."""
    c = x.shape[-1]
    if w_m.shape != (4 * c, 2 * c):
        raise ShapeError(f"merge weight must be [{4 * c},{2 * c}], got {w_m.shape}")
    return ops.matmul(gather_2x2(x, height, width), w_m)


# ------------------------------------------------------------------ windows


def window_partition(x, layout: WindowLayout) -> Tensor:
    """[.., H, W, C] -> [.., nW, w*w, C], cyclically rolled by (-s, -s) first."""
    x = as_tensor(x)
    *lead, h, w, c = x.shape
    if (h, w) != (layout.height, layout.width):
        raise ShapeError(f"grid {h}x{w} does not match layout {layout.height}x{layout.width}")
    nl = len(lead)
    if layout.shift:
        x = ops.roll(x, (-layout.shift, -layout.shift), (nl, nl + 1))
    ws = layout.window
    t = ops.reshape(x, (*lead, h // ws, ws, w // ws, ws, c))
    t = ops.transpose(t, (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return ops.reshape(t, (*lead, layout.n_windows, ws * ws, c))


def window_reverse(windows, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`window_partition`."""
    windows = as_tensor(windows)
    *lead, n_w, n_tok, c = windows.shape
    ws = layout.window
    if n_w != layout.n_windows or n_tok != ws * ws:
        raise ShapeError(f"windows {windows.shape} do not match layout {layout}")
    h, w = layout.height, layout.width
    nl = len(lead)
    t = ops.reshape(windows, (*lead, h // ws, w // ws, ws, ws, c))
    t = ops.transpose(t, (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4))
    t = ops.reshape(t, (*lead, h, w, c))
    if layout.shift:
        t = ops.roll(t, (layout.shift, layout.shift), (nl, nl + 1))
    return t


@functools.lru_cache(maxsize=64)
def shift_mask(layout: WindowLayout) -> np.ndarray | None:
    """Additive [nW, w*w, w*w] mask blocking attention across rolled-in regions."""
    if not layout.shift:
        return None
    ws, s = layout.window, layout.shift
    region = np.zeros((layout.height, layout.width, 1))
    label = 0
    for hs in (slice(0, -ws), slice(-ws, -s), slice(-s, None)):
        for wsl in (slice(0, -ws), slice(-ws, -s), slice(-s, None)):
            region[hs, wsl] = label
            label += 1
    unshifted = WindowLayout(layout.height, layout.width, ws, 0)
    ids = window_partition(region, unshifted).data[..., 0]  # nW, w*w
    diff = ids[:, :, None] != ids[:, None, :]
    return np.where(diff, MASK_NEG, 0.0)


# ---------------------------------------------------------------- attention


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, n, d = t.shape
    t = ops.reshape(t, (*lead, n, heads, d // heads))
    return ops.swapaxes(t, -2, -3)  # .., h, n, dk


def _merge_heads(t: Tensor) -> Tensor:
    t = ops.swapaxes(t, -2, -3)  # .., n, h, dk
    *lead, n, h, dk = t.shape
    return ops.reshape(t, (*lead, n, h * dk))


def attention_weights(q: Tensor, k: Tensor, d_k: int, mask: np.ndarray | None = None) -> Tensor:
    scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = ops.add(scores, mask)
    return ops.softmax_rows(scores)


def _attend(x_q: Tensor, x_kv: Tensor, p: AttentionParams, mask: np.ndarray | None) -> Tensor:
    q = _split_heads(ops.matmul(x_q, p.w_q), p.heads)
    k = _split_heads(ops.matmul(x_kv, p.w_k), p.heads)
    v = _split_heads(ops.matmul(x_kv, p.w_v), p.heads)
    a = attention_weights(q, k, p.d_k, mask)
    return ops.matmul(_merge_heads(ops.matmul(a, v)), p.w_out)


def _prepare_mask(mask, x: Tensor) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=np.float64)
    n = x.shape[-2]
    if mask.shape[-2:] != (n, n) or mask.ndim not in (2, 3):
        raise ShapeError(f"mask shape {mask.shape} does not fit sequence length {n}")
    if mask.ndim == 3:
        if x.ndim < 3 or x.shape[-3] != mask.shape[0]:
            raise ShapeError(f"mask windows {mask.shape[0]} do not match input {x.shape}")
        mask = mask[:, None]  # nW, 1(head), n, n
    return mask


def multi_head_self_attention(x: Tensor, params: AttentionParams, mask=None) -> Tensor:
    """softmax(QK^T/sqrt(d_k) + mask) V per head, heads concatenated, then W_out.

    ``mask`` is ``[L, L]`` or ``[nW, L, L]`` (for ``x`` shaped ``[.., nW, L, d]``).
    """
    x = as_tensor(x)
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"input width {x.shape[-1]} != d_model {params.d_model}")
    return _attend(x, x, params, _prepare_mask(mask, x))


def cross_attention(x_seq, y_seq, params: AttentionParams) -> Tensor:
    """Queries from ``x_seq``; keys and values from ``y_seq``."""
    x_seq, y_seq = as_tensor(x_seq), as_tensor(y_seq)
    if x_seq.shape[-1] != y_seq.shape[-1] or x_seq.shape[-1] != params.d_model:
        raise ShapeError(f"cross_attention width mismatch: {x_seq.shape} vs {y_seq.shape}, d_model {params.d_model}")
    if x_seq.shape[:-2] != y_seq.shape[:-2]:
        raise ShapeError(f"cross_attention batch mismatch: {x_seq.shape} vs {y_seq.shape}")
    return _attend(x_seq, y_seq, params, None)


# ------------------------------------------------------------------- blocks


def mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = ops.gelu(ops.linear(x, params[prefix + "w1"], params[prefix + "b1"]))
    return ops.linear(h, params[prefix + "w2"], params[prefix + "b2"])


def swin_block(
    x: Tensor,
    layout: WindowLayout,
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    drop: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """x + WindowAttn(LN(x)), then + MLP(LN(.)); ``x`` is [.., H*W, d]."""
    *lead, n_tok, d = x.shape
    if n_tok != layout.height * layout.width:
        raise ShapeError(f"token count {n_tok} does not match layout {layout.height}x{layout.width}")
    attn = AttentionParams.from_table(params, prefix + "attn.", heads)
    h = ops.layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    h = ops.reshape(h, (*lead, layout.height, layout.width, d))
    win = window_partition(h, layout)
    win = multi_head_self_attention(win, attn, shift_mask(layout))
    h = ops.reshape(window_reverse(win, layout), (*lead, n_tok, d))
    x = ops.add(x, ops.dropout(h, drop, rng, training))
    h = mlp(ops.layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"]), params, prefix + "mlp.")
    return ops.add(x, ops.dropout(h, drop, rng, training))


def init_swin_block(table: dict, prefix: str, d: int, mlp_ratio: int, init) -> None:
    """Populate ``table`` with one block's parameters; ``init(name, shape, fan_in)``."""
    for ln in ("ln1.", "ln2."):
        table[prefix + ln + "g"] = Tensor(np.ones(d))
        table[prefix + ln + "b"] = Tensor(np.zeros(d))
    for w in ("w_q", "w_k", "w_v", "w_out"):
        table[prefix + "attn." + w] = init(prefix + "attn." + w, (d, d), d)
    hidden = mlp_ratio * d
    table[prefix + "mlp.w1"] = init(prefix + "mlp.w1", (d, hidden), d)
    table[prefix + "mlp.b1"] = Tensor(np.zeros(hidden))
    table[prefix + "mlp.w2"] = init(prefix + "mlp.w2", (hidden, d), hidden)
    table[prefix + "mlp.b2"] = Tensor(np.zeros(d))
