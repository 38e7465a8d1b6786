# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: FNV-1a checksum and stride-1 im2col / col2im.

Column layout is ``[C*kh*kw, N*Ho*Wo]`` so a convolution is one GEMM.
"""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport uint64_t

cnp.import_array()

BACKEND = "cython"


def fnv1a64(const unsigned char[::1] buf):
    cdef uint64_t h = 0xcbf29ce484222325ULL
    cdef uint64_t prime = 0x100000001b3ULL
    cdef Py_ssize_t i, n = buf.shape[0]
    with nogil:
        for i in range(n):
            h ^= buf[i]
            h *= prime
    return int(h)


def im2col(const double[:, :, :, ::1] x, int kh, int kw):
    cdef Py_ssize_t n_img = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t hp = x.shape[2], wp = x.shape[3]
    cdef Py_ssize_t ho = hp - kh + 1, wo = wp - kw + 1
    out_arr = np.empty((c_in * kh * kw, n_img * ho * wo), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, r, q, row, base
    with nogil:
        for c in range(c_in):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for n in range(n_img):
                        base = n * ho * wo
                        for r in range(ho):
                            for q in range(wo):
                                out[row, base + r * wo + q] = x[n, c, r + i, q + j]
    return out_arr


def col2im(const double[:, ::1] cols, shape, int kh, int kw):
    cdef Py_ssize_t n_img = shape[0], c_in = shape[1], hp = shape[2], wp = shape[3]
    cdef Py_ssize_t ho = hp - kh + 1, wo = wp - kw + 1
    out_arr = np.zeros((n_img, c_in, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, r, q, row, base
    with nogil:
        # fixed (i, j) accumulation order per output pixel keeps results bit-identical
        for n in range(n_img):
            base = n * ho * wo
            for c in range(c_in):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for r in range(ho):
                            for q in range(wo):
                                out[n, c, r + i, q + j] += cols[row, base + r * wo + q]
    return out_arr
