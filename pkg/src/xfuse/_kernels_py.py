"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(buf) -> int:
    h = _FNV_OFFSET
    for byte in bytes(buf):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, hp, wp = x.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, shape, kh: int, kw: int) -> np.ndarray:
    n, c, hp, wp = shape
    ho, wo = hp - kh + 1, wp - kw + 1
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho, j : j + wo] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out
