# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels for NCHW float64 convolution.

Loop order matches the numpy fallback in :mod:`medusa.kernels` so both
backends accumulate in the same order and return bit-identical results.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int k, int stride, int pad):
    """Unfold ``x`` (N, C, H, W) into columns (N, C*k*k, Ho*Wo)."""
    cdef Py_ssize_t n_batch = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t out_h = (height + 2 * pad - k) // stride + 1
    cdef Py_ssize_t out_w = (width + 2 * pad - k) // stride + 1
    cols_arr = np.zeros((n_batch, chans * k * k, out_h * out_w), dtype=np.float64)
    cdef double[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for n in range(n_batch):
            for c in range(chans):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for oy in range(out_h):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= height:
                                continue
                            for ox in range(out_w):
                                ix = ox * stride + kj - pad
                                if ix < 0 or ix >= width:
                                    continue
                                cols[n, row, oy * out_w + ox] = x[n, c, iy, ix]
    return cols_arr


def col2im(const double[:, :, ::1] cols, int chans, int height, int width,
           int k, int stride, int pad):
    """Fold columns (N, C*k*k, Ho*Wo) back to (N, C, H, W), summing overlaps."""
    cdef Py_ssize_t n_batch = cols.shape[0]
    cdef Py_ssize_t out_h = (height + 2 * pad - k) // stride + 1
    cdef Py_ssize_t out_w = (width + 2 * pad - k) // stride + 1
    out_arr = np.zeros((n_batch, chans, height, width), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for n in range(n_batch):
            for c in range(chans):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for oy in range(out_h):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= height:
                                continue
                            for ox in range(out_w):
                                ix = ox * stride + kj - pad
                                if ix < 0 or ix >= width:
                                    continue
                                out[n, c, iy, ix] += cols[n, row, oy * out_w + ox]
    return out_arr
