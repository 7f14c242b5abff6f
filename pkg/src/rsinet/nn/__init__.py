"""Float64 tensor engine: operators, reverse-mode gradients, Adam, checkpoints."""

from .layers import ConvLayerParams, Linear, Module, glorot_uniform
from .ops import (
    DEFAULT_LEAKY_SLOPE,
    activation,
    concat_channels,
    conv2d,
    dense_linear,
    global_avg_pool,
    leaky_relu,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    transpose_conv2d,
)
from .optim import Adam, AdamState, MissingGradientError, adam_step
from .tensor import GraphError, NonFiniteError, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "ConvLayerParams",
    "DEFAULT_LEAKY_SLOPE",
    "GraphError",
    "Linear",
    "MissingGradientError",
    "Module",
    "NonFiniteError",
    "Tensor",
    "activation",
    "adam_step",
    "backward",
    "concat_channels",
    "conv2d",
    "dense_linear",
    "glorot_uniform",
    "global_avg_pool",
    "is_grad_enabled",
    "leaky_relu",
    "no_grad",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "transpose_conv2d",
]
