"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the largest gradient magnitude involved."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-10)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """d f() / d t by central differences; only ``coords`` (flat indices) if given."""
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def check_gradients(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between backprop and central differences over ``inputs``.

    With ``max_coords`` set, each input is probed on a random subset of at
    most that many coordinates (the analytic gradient is compared on the same
    subset).
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    backward(f())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if max_coords is not None and t.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(gen.choice(t.size, size=max_coords, replace=False))
            num = numeric_grad(f, t, h, coords).reshape(-1)[coords]
            worst = max(worst, relative_error(analytic.reshape(-1)[coords], num))
        else:
            worst = max(worst, relative_error(analytic, numeric_grad(f, t, h)))
    return worst
