"""Differentiable operators over :class:`Tensor`.

Each operator computes its forward value with numpy and registers a closure
returning the gradient for every parent. Gradients of broadcast operands are
summed back to the operand's shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np
from scipy import special

from . import conv as _k
from .tensor import Tensor, as_tensor, make_result

if TYPE_CHECKING:
    from .layers import ConvLayerParams

DEFAULT_LEAKY_SLOPE = 0.01

_branches = threading.local()


@contextmanager
def record_branches() -> Iterator[list[np.ndarray]]:
    """Collect the sign pattern of every Leaky ReLU input evaluated inside the block.

    Finite-difference checks use this to spot probes that straddle a kink.
    """
    log: list[np.ndarray] = []
    previous = getattr(_branches, "log", None)
    _branches.log = log
    try:
        yield log
    finally:
        _branches.log = previous


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def leaky_relu(x: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    positive = x.data > 0
    log = getattr(_branches, "log", None)
    if log is not None:
        log.append(positive)
    scale = np.where(positive, 1.0, slope)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def activation(x: Tensor, kind: str = "leaky_relu", slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


# --- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return make_result(x.data.T, (x,), lambda g: (np.ascontiguousarray(g.T),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape
    return make_result(
        np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, original),)
    )


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def grad(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            parts.append(np.ascontiguousarray(g[tuple(index)]))
        return parts

    return make_result(np.concatenate([x.data for x in xs], axis=axis), xs, grad)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate ``[N, C_i, H, W]`` maps along the channel axis in argument order."""
    if not xs:
        raise ValueError("concat_channels needs at least one input")
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ValueError(f"spatial/batch mismatch: {x.shape} vs {ref}")
    if len(xs) == 1:
        return xs[0]
    return concat(xs, axis=1)


# --- reductions --------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad)


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make_result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``[N, C, H, W] -> [N, C, 1, 1]``."""
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects [N, C, H, W]")
    n, c, h, w = x.shape
    area = h * w
    out = x.data.reshape(n, c, area).sum(axis=2).reshape(n, c, 1, 1) / area
    return make_result(out, (x,), lambda g: (np.broadcast_to(g / area, x.shape).copy(),))


# --- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return make_result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight`` plus an optional bias broadcast over rows."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense_linear shape mismatch: {x.shape} @ {weight.shape}")
    if bias is None:
        return matmul(x, weight)
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data + bias.data
    return make_result(
        out, (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def sparse_matmul(matrix, x: Tensor) -> Tensor:
    """Constant (scipy.sparse) matrix times a dense 2-D tensor."""
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ValueError(f"sparse_matmul shape mismatch: {matrix.shape} @ {x.shape}")
    transposed = matrix.T.tocsr()
    return make_result(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(transposed @ g),))


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit length, ``x / sqrt(|x|^2 + eps)``."""
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    y = x.data / norm

    def grad(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return make_result(y, (x,), grad)


def normalize_adjacency(a: Tensor) -> Tensor:
    """Symmetric degree normalization ``D^-1/2 A D^-1/2`` with ``d_i = sum_j a_ij``."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    degree = a.data.sum(axis=1)
    if np.any(degree <= 0):
        raise ValueError("adjacency has a node with non-positive degree")
    s = 1.0 / np.sqrt(degree)
    out = s[:, None] * a.data * s[None, :]

    def grad(g):
        ga = g * s[:, None] * s[None, :]
        # d_i enters through s_i on row i and column i
        gs = (g * a.data * s[None, :]).sum(axis=1) + (g * a.data * s[:, None]).sum(axis=0)
        gd = gs * (-0.5) * s ** 3
        return (ga + gd[:, None],)

    return make_result(out, (a,), grad)


# --- convolution -------------------------------------------------------------

def conv2d(x: Tensor, params: "ConvLayerParams") -> Tensor:
    """Cross-correlation with dilated taps; weight is ``[out, in, kh, kw]``."""
    if params.transposed:
        raise ValueError("conv2d called with transposed params")
    w, b = params.weight, params.bias
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d input {x.shape} does not match weight {w.shape}")
    s, p, d = params.stride, params.padding, params.dilation
    kh, kw = w.shape[2:]
    h, wd = x.shape[2:]
    if _k.out_extent(h, kh, s, p, d) < 1 or _k.out_extent(wd, kw, s, p, d) < 1:
        raise ValueError(f"conv2d output extent is non-positive for input {x.shape}")
    out = _k.conv_forward(x.data, w.data, s, p, d)
    if b is not None:
        out += b.data[None, :, None, None]

    def grad(g):
        gx = _k.conv_backward_data(g, w.data, s, p, d, (h, wd)) if x.requires_grad else None
        gw = _k.conv_backward_weight(x.data, g, s, p, d, (kh, kw)) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, grad)


def transpose_conv2d(x: Tensor, params: "ConvLayerParams") -> Tensor:
    """Adjoint of :func:`conv2d` for the same weight tensor.

    The weight keeps the layout of the convolution it is the adjoint of, so it
    is ``[in, out, kh, kw]`` from this operator's point of view.
    """
    if not params.transposed:
        raise ValueError("transpose_conv2d called with non-transposed params")
    w, b = params.weight, params.bias
    if x.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"transpose_conv2d input {x.shape} does not match weight {w.shape}")
    s, p, d, op = params.stride, params.padding, params.dilation, params.output_padding
    kh, kw = w.shape[2:]
    h, wd = x.shape[2:]
    ho = _k.transposed_extent(h, kh, s, p, d, op)
    wo = _k.transposed_extent(wd, kw, s, p, d, op)
    if ho < 1 or wo < 1:
        raise ValueError(f"transpose_conv2d output extent is non-positive for input {x.shape}")
    out = _k.conv_backward_data(x.data, w.data, s, p, d, (ho, wo))
    if b is not None:
        out += b.data[None, :, None, None]

    def grad(g):
        gx = _k.conv_forward(g, w.data, s, p, d) if x.requires_grad else None
        gw = _k.conv_backward_weight(g, x.data, s, p, d, (kh, kw)) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, grad)


# --- classification ------------------------------------------------------------

def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), grad)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean ``-log softmax(logits)[label]`` over non-ignored pixels.

    ``logits`` is ``[N, C, H, W]`` and ``labels`` an integer ``[N, H, W]`` raster.
    """
    if logits.ndim != 4:
        raise ValueError("logits must be [N, C, H, W]")
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"label out of range [0, {c})")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no non-ignored pixels to average over")

    safe = np.where(valid, labels, 0).astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    loss = float(((lse - picked) * valid).sum() / count)

    def grad(g):
        prob = np.exp(shifted - lse[:, None])
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((prob - onehot) * valid[:, None] * (g / count),)

    return make_result(np.asarray(loss), (logits,), grad)
