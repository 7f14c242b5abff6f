"""Parameter containers: a minimal Module tree, conv and linear layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Walks attributes in definition order to name parameters ``a.b.weight``."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def load_parameters(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.parameters()
        if strict and set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise KeyError(f"parameter mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, tensor in own.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ValueError(f"{name}: shape {value.shape} != {tensor.shape}")
            tensor.data[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def leaky_relu_gain(slope: float = 0.01) -> float:
    """Variance-preserving gain for a Leaky ReLU that follows the layer."""
    return float(np.sqrt(2.0 / (1.0 + slope * slope)))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: float, fan_out: float,
                   gain: float = 1.0) -> Tensor:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


@dataclass(eq=False)
class ConvLayerParams(Module):
    """Weights and geometry of one (possibly transposed) convolution.

    ``weight`` is ``[out, in, kh, kw]`` for a forward convolution. A transposed
    layer stores the weight of the convolution it is the adjoint of, i.e.
    ``[in, out, kh, kw]`` relative to its own data flow.
    """

    weight: Tensor
    bias: Tensor | None
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    transposed: bool = False
    output_padding: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.weight.ndim != 4:
            raise ValueError("conv weight must be 4-D")
        if self.transposed and not 0 <= self.output_padding < max(self.stride, self.dilation):
            raise ValueError("output_padding must be smaller than stride or dilation")

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        kernel: int,
        *,
        stride: int = 1,
        dilation: int = 1,
        padding: int | None = None,
        transposed: bool = False,
        bias: bool = True,
        gain: float = 1.0,
    ) -> "ConvLayerParams":
        """Glorot-initialised layer; ``padding=None`` picks same-size padding.

        Fans count the taps that actually meet each pixel, so a stride-s layer
        divides the fan on its sparse side by s^2.
        """
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        output_padding = 0
        if transposed and stride > 1:
            # stride-s layers multiply extents exactly by s
            output_padding = stride - 1 + 2 * padding - dilation * (kernel - 1)
        shape = (in_ch, out_ch, kernel, kernel) if transposed else (out_ch, in_ch, kernel, kernel)
        taps = kernel * kernel
        fan_in, fan_out = in_ch * taps, out_ch * taps
        if transposed:
            fan_in /= stride * stride
        else:
            fan_out /= stride * stride
        weight = glorot_uniform(rng, shape, fan_in, fan_out, gain)
        b = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        return cls(weight, b, stride, dilation, padding, transposed, output_padding)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0] if self.transposed else self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transpose_conv2d(x, self) if self.transposed else ops.conv2d(x, self)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = glorot_uniform(rng, (d_in, d_out), d_in, d_out)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense_linear(x, self.weight, self.bias)
