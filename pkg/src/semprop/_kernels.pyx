# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for padded, dilated, strided 2-D convolution.

Loop order in ``col2im`` matches the numpy fallback exactly (channel, kernel
row, kernel column, output row, output column) so both backends accumulate
overlapping contributions in the same order and agree bit for bit.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int pad, int dilation,
           int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.zeros((n, c * kh * kw, oh * ow), dtype=dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t b, ch, i, j, y, xo, row, iy, ix
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(oh):
                        iy = y * stride - pad + i * dilation
                        if iy < 0 or iy >= h:
                            continue
                        for xo in range(ow):
                            ix = xo * stride - pad + j * dilation
                            if ix < 0 or ix >= w:
                                continue
                            cols[b, row, y * ow + xo] = x[b, ch, iy, ix]
    return cols_arr


def col2im(floating[:, :, ::1] cols, int c, int h, int w, int kh, int kw,
           int pad, int dilation, int stride):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, y, xo, row, iy, ix
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(oh):
                        iy = y * stride - pad + i * dilation
                        if iy < 0 or iy >= h:
                            continue
                        for xo in range(ow):
                            ix = xo * stride - pad + j * dilation
                            if ix < 0 or ix >= w:
                                continue
                            out[b, ch, iy, ix] += cols[b, row, y * ow + xo]
    return out_arr
