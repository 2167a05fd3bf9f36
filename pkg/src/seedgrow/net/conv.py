"""Valid-mode 2D convolution on channels-last batches, with backward pass.

Arrays are laid out (batch, height, width, channels).  Kernels use the
(out_ch, in_ch, kh, kw) layout of the checkpoint format and are flattened to
a (kh*kw*in_ch, out_ch) matrix so each layer is a single GEMM over an
im2col buffer.
"""

from __future__ import annotations

import numba
import numpy as np


def out_size(n: int, k: int, dilation: int, stride: int) -> int:
    return (n - dilation * (k - 1) - 1) // stride + 1


def kernel_matrix(w: np.ndarray) -> np.ndarray:
    cout, cin, kh, kw = w.shape
    return w.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)


@numba.njit(cache=True, nogil=True)
def _im2col(x, cols, k, dilation, stride):
    nb, ho, wo, _ = cols.shape
    c = x.shape[3]
    for b in range(nb):
        for oy in range(ho):
            for ox in range(wo):
                for i in range(k):
                    y = oy * stride + i * dilation
                    for j in range(k):
                        xx = ox * stride + j * dilation
                        t = (i * k + j) * c
                        for ch in range(c):
                            cols[b, oy, ox, t + ch] = x[b, y, xx, ch]


@numba.njit(cache=True, nogil=True)
def _col2im(dcols, dx, k, dilation, stride):
    nb, ho, wo, _ = dcols.shape
    c = dx.shape[3]
    for b in range(nb):
        for oy in range(ho):
            for ox in range(wo):
                for i in range(k):
                    y = oy * stride + i * dilation
                    for j in range(k):
                        xx = ox * stride + j * dilation
                        t = (i * k + j) * c
                        for ch in range(c):
                            dx[b, y, xx, ch] += dcols[b, oy, ox, t + ch]


def im2col(x: np.ndarray, k: int, dilation: int, stride: int) -> np.ndarray:
    b, h, w, c = x.shape
    ho, wo = out_size(h, k, dilation, stride), out_size(w, k, dilation, stride)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {k} dilation {dilation}")
    if k == 1:
        return x[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, :]
    cols = np.empty((b, ho, wo, k * k * c), dtype=x.dtype)
    _im2col(np.ascontiguousarray(x), cols, k, dilation, stride)
    return cols


def conv_forward(x, w, b, dilation=1, stride=1):
    """Returns (output, cols); ``cols`` is the cache needed by backward."""
    k = w.shape[2]
    cols = im2col(x, k, dilation, stride)
    out = cols @ kernel_matrix(w)
    out += b
    return out, cols


def conv_backward(dout, cols, x_shape, w, dilation=1, stride=1):
    """Gradients (dx, dw, db) of a valid convolution given the upstream
    gradient ``dout`` and the forward cache ``cols``.  Pass ``x_shape=None``
    to skip dx."""
    cout, cin, k, _ = w.shape
    kdim = cols.shape[-1]
    d2 = dout.reshape(-1, cout)
    dw_mat = cols.reshape(-1, kdim).T @ d2
    dw = dw_mat.reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    if x_shape is None:
        return None, dw, db
    dcols = dout @ kernel_matrix(w).T
    dx = np.zeros(x_shape, dtype=dout.dtype)
    if k == 1 and stride == 1:
        dx += dcols
    else:
        _col2im(np.ascontiguousarray(dcols), dx, k, dilation, stride)
    return dx, dw, db
