# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (see ``_kernels_py`` for semantics)."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((c * 9, n * h * w), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t ci, kh, kw, b, i, j, row, col, si, sj
    with nogil:
        for ci in range(c):
            for kh in range(3):
                for kw in range(3):
                    row = (ci * 3 + kh) * 3 + kw
                    for b in range(n):
                        for i in range(h):
                            si = i + kh - 1
                            if si < 0 or si >= h:
                                continue
                            col = (b * h + i) * w
                            for j in range(w):
                                sj = j + kw - 1
                                if 0 <= sj < w:
                                    cols[row, col + j] = x[b, ci, si, sj]
    return out


def col2im3x3(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t ci, kh, kw, b, i, j, row, col, si, sj
    with nogil:
        for kh in range(3):
            for kw in range(3):
                for ci in range(c):
                    row = (ci * 3 + kh) * 3 + kw
                    for b in range(n):
                        for i in range(h):
                            si = i + kh - 1
                            if si < 0 or si >= h:
                                continue
                            col = (b * h + i) * w
                            for j in range(w):
                                sj = j + kw - 1
                                if 0 <= sj < w:
                                    dx[b, ci, si, sj] += cols[row, col + j]
    return out


def maxpool2x2(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.uint8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ci, i, j, k
    cdef real best, v
    cdef unsigned char arg
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ci, 2 * i, 2 * j]
                        arg = 0
                        for k in range(1, 4):
                            v = x[b, ci, 2 * i + k // 2, 2 * j + k % 2]
                            # NaN never wins, matching numpy argmax only for finite data
                            if v > best:
                                best = v
                                arg = k
                        out[b, ci, i, j] = best
                        idx[b, ci, i, j] = arg
    return out_arr, idx_arr


def maxpool2x2_backward(real[:, :, :, ::1] dout, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, 2 * ho, 2 * wo), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ci, i, j, k
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        k = idx[b, ci, i, j]
                        dx[b, ci, 2 * i + k // 2, 2 * j + k % 2] = dout[b, ci, i, j]
    return out
