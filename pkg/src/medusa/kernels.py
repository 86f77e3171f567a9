"""Convolution unfolding kernels with a compiled fast path.

The Cython extension ``medusa._kernels`` is used when it was built; otherwise
the pure-numpy implementations below are selected at import time. Setting
``MEDUSA_PURE_PYTHON=1`` forces the fallback. Both paths produce bit-identical
output.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col_numpy(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, k, k) -> (N, C, k, k, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, oh * ow)


def col2im_numpy(
    cols: np.ndarray, chans: int, height: int, width: int, k: int, stride: int, pad: int
) -> np.ndarray:
    n = cols.shape[0]
    oh, ow = out_size(height, k, stride, pad), out_size(width, k, stride, pad)
    cols = cols.reshape(n, chans, k, k, oh, ow)
    out = np.zeros((n, chans, height + 2 * pad, width + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols[:, :, ki, kj]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


BACKEND = "numpy"
im2col = im2col_numpy
col2im = col2im_numpy

if os.environ.get("MEDUSA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from medusa import _kernels
    except ImportError:  # extension not built
        _kernels = None
    if _kernels is not None:
        BACKEND = "cython"

        def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:  # noqa: F811
            return _kernels.im2col(np.ascontiguousarray(x, dtype=np.float64), k, stride, pad)

        def col2im(  # noqa: F811
            cols: np.ndarray, chans: int, height: int, width: int, k: int, stride: int, pad: int
        ) -> np.ndarray:
            return _kernels.col2im(
                np.ascontiguousarray(cols, dtype=np.float64), chans, height, width, k, stride, pad
            )
