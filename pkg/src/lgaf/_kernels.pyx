# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im loops for conv2d.

Both kernels follow the exact element and accumulation order of the numpy
fallback in ``_fallback.py``, so the two backends are bit-identical.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    cdef Py_ssize_t n_batch = xp.shape[0]
    cdef Py_ssize_t chans = xp.shape[1]
    cdef Py_ssize_t n, c, i, j, di, dj, row, col, y0, x0
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.empty((n_batch * ho * wo, chans * k * k), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    with nogil:
        for n in range(n_batch):
            for i in range(ho):
                y0 = i * stride
                for j in range(wo):
                    x0 = j * stride
                    row = (n * ho + i) * wo + j
                    col = 0
                    for c in range(chans):
                        for di in range(k):
                            for dj in range(k):
                                cols[row, col] = xp[n, c, y0 + di, x0 + dj]
                                col += 1
    return cols_arr


def col2im(real[:, ::1] cols, int n_batch, int chans, int hp, int wp,
           int k, int stride, int ho, int wo):
    cdef Py_ssize_t n, c, i, j, di, dj, row, col
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_batch, chans, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    with nogil:
        for di in range(k):
            for dj in range(k):
                for n in range(n_batch):
                    for c in range(chans):
                        col = (c * k + di) * k + dj
                        for i in range(ho):
                            for j in range(wo):
                                row = (n * ho + i) * wo + j
                                out[n, c, i * stride + di, j * stride + dj] += cols[row, col]
    return out_arr
