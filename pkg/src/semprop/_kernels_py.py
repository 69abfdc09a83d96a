"""Pure-numpy im2col / col2im, used when the compiled extension is absent.

Results are bit-identical to ``_kernels.pyx``: ``col2im`` accumulates kernel
taps in the same (row, column) order.
"""

import numpy as np


def _out_extent(size, k, pad, dilation, stride):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def im2col(x, kh, kw, pad, dilation, stride):
    n, c, h, w = x.shape
    oh = _out_extent(h, kh, pad, dilation, stride)
    ow = _out_extent(w, kw, pad, dilation, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        ys = i * dilation
        for j in range(kw):
            xs = j * dilation
            cols[:, :, i, j] = xp[:, :, ys:ys + stride * (oh - 1) + 1:stride,
                                  xs:xs + stride * (ow - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, c, h, w, kh, kw, pad, dilation, stride):
    n = cols.shape[0]
    oh = _out_extent(h, kh, pad, dilation, stride)
    ow = _out_extent(w, kw, pad, dilation, stride)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        ys = i * dilation
        for j in range(kw):
            xs = j * dilation
            out[:, :, ys:ys + stride * (oh - 1) + 1:stride,
                xs:xs + stride * (ow - 1) + 1:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)
