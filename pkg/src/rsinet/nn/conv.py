"""Raw numpy kernels for dilated, strided 2-D cross-correlation.

Convolution is evaluated one kernel tap at a time: each tap is a strided view
of the padded input multiplied by a (C_out, C_in) matrix. That keeps memory at
O(input + output) instead of the k*k blow-up of im2col, and the summation order
is fixed, so results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np


def out_extent(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def transposed_extent(n: int, k: int, stride: int, pad: int, dilation: int, output_padding: int = 0) -> int:
    return (n - 1) * stride - 2 * pad + dilation * (k - 1) + 1 + output_padding


def _tap_major(w: np.ndarray) -> np.ndarray:
    # [kh, kw, O, C] so every per-tap matrix is contiguous and goes through BLAS
    return np.ascontiguousarray(w.transpose(2, 3, 0, 1))


def _tap(i: int, dilation: int, stride: int, n_out: int) -> slice:
    start = i * dilation
    return slice(start, start + stride * (n_out - 1) + 1, stride)


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, dilation: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = out_extent(h, kh, stride, pad, dilation)
    wo = out_extent(wd, kw, stride, pad, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    wt = _tap_major(w)
    out = np.zeros((n, o, ho * wo))
    for i in range(kh):
        rows = _tap(i, dilation, stride, ho)
        for j in range(kw):
            patch = xp[:, :, rows, _tap(j, dilation, stride, wo)].reshape(n, c, ho * wo)
            out += wt[i, j] @ patch
    return out.reshape(n, o, ho, wo)


def conv_backward_data(
    g: np.ndarray, w: np.ndarray, stride: int, pad: int, dilation: int, in_hw: tuple[int, int]
) -> np.ndarray:
    """Adjoint of :func:`conv_forward` in its input; also the transposed-conv forward."""
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    g2 = g.reshape(n, o, ho * wo)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for i in range(kh):
        rows = _tap(i, dilation, stride, ho)
        for j in range(kw):
            cols = _tap(j, dilation, stride, wo)
            gxp[:, :, rows, cols] += (wt[i, j] @ g2).reshape(n, c, ho, wo)
    if pad:
        gxp = gxp[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(gxp)


def conv_backward_weight(
    x: np.ndarray, g: np.ndarray, stride: int, pad: int, dilation: int, k_hw: tuple[int, int]
) -> np.ndarray:
    n, c, _, _ = x.shape
    _, o, ho, wo = g.shape
    kh, kw = k_hw
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    g2 = g.reshape(n, o, ho * wo)
    gw = np.empty((o, c, kh, kw))
    for i in range(kh):
        rows = _tap(i, dilation, stride, ho)
        for j in range(kw):
            patch = xp[:, :, rows, _tap(j, dilation, stride, wo)].reshape(n, c, ho * wo)
            acc = g2[0] @ patch[0].T
            for b in range(1, n):
                acc += g2[b] @ patch[b].T
            gw[:, :, i, j] = acc
    return gw
