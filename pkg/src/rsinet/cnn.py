"""Image stream: dense atrous groups and the parallel atrous block.

For an ``H x W`` input the stream emits a low-level tap at ``H/4`` and a
high-level tap at ``H/16``::

    stem 3x3/2 -> dense group A -> 1x1 -> 3x3/2 -> [low tap]
               -> dense group B -> 1x1 -> 3x3/2
               -> parallel atrous block -> 3x3/2 -> 1x1 -> [high tap]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ops
from .nn.layers import ConvLayerParams, Module, leaky_relu_gain
from .nn.tensor import Tensor


@dataclass(frozen=True)
class CnnStreamConfig:
    in_channels: int = 3
    stem_channels: int = 64
    growth: int = 64
    unit_rates: tuple[int, ...] = (1, 2, 3)
    tap_channels: int = 256
    branch_channels: int = 64
    branch_rates: tuple[int, ...] = (6, 12, 18)
    dense: bool = True
    parallel: bool = True
    leaky_slope: float = 0.01


@dataclass
class EncoderTaps:
    low: Tensor
    high: Tensor


class DenseAtrousUnit(Module):
    """``concat(x, lrelu(conv3x3_r(x)))``: adds ``growth`` channels, keeps extents."""

    def __init__(self, rng, in_ch: int, growth: int, rate: int, slope: float = 0.01):
        self.conv = ConvLayerParams.create(rng, in_ch, growth, 3, dilation=rate, gain=leaky_relu_gain(slope))
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return ops.concat_channels([x, ops.leaky_relu(self.conv(x), self.slope)])


def dense_atrous_unit(x: Tensor, unit: DenseAtrousUnit) -> Tensor:
    return unit(x)


class DenseGroup(Module):
    def __init__(self, rng, in_ch: int, growth: int, rates, slope: float = 0.01):
        self.units = []
        for rate in rates:
            self.units.append(DenseAtrousUnit(rng, in_ch, growth, rate, slope))
            in_ch += growth
        self.out_channels = in_ch

    def __call__(self, x: Tensor) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x


class PlainGroup(Module):
    """Ablation stand-in for a dense group: chained rate-1 3x3 convs, no concatenation."""

    def __init__(self, rng, in_ch: int, n_layers: int, slope: float = 0.01):
        self.convs = [ConvLayerParams.create(rng, in_ch, in_ch, 3, gain=leaky_relu_gain(slope)) for _ in range(n_layers)]
        self.out_channels = in_ch
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.leaky_relu(conv(x), self.slope)
        return x


class ParallelAtrousBlock(Module):
    """1x1, three rate-r 3x3 branches and image pooling, concatenated in that order."""

    def __init__(self, rng, in_ch: int, branch_ch: int, rates=(6, 12, 18), slope: float = 0.01):
        gain = leaky_relu_gain(slope)
        self.point = ConvLayerParams.create(rng, in_ch, branch_ch, 1, gain=gain)
        self.atrous = [ConvLayerParams.create(rng, in_ch, branch_ch, 3, dilation=r, gain=gain) for r in rates]
        self.pool = ConvLayerParams.create(rng, in_ch, branch_ch, 1, gain=gain)
        self.out_channels = branch_ch * (2 + len(rates))
        self.slope = slope

    def branches(self, x: Tensor) -> list[Tensor]:
        act = lambda t: ops.leaky_relu(t, self.slope)  # noqa: E731
        out = [act(self.point(x))]
        out += [act(conv(x)) for conv in self.atrous]
        pooled = act(self.pool(ops.global_avg_pool(x)))
        n, c = pooled.shape[:2]
        out.append(ops.broadcast_to(pooled, (n, c) + x.shape[2:]))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return ops.concat_channels(self.branches(x))


def parallel_atrous_block(x: Tensor, block: ParallelAtrousBlock) -> Tensor:
    return block(x)


class SingleConvBlock(Module):
    """Ablation stand-in for the parallel block: one 3x3 rate-1 conv, same output width."""

    def __init__(self, rng, in_ch: int, out_ch: int, slope: float = 0.01):
        self.conv = ConvLayerParams.create(rng, in_ch, out_ch, 3, gain=leaky_relu_gain(slope))
        self.out_channels = out_ch
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(self.conv(x), self.slope)


class CnnStream(Module):
    def __init__(self, rng: np.random.Generator, config: CnnStreamConfig = CnnStreamConfig()):
        self.config = config
        c = config
        conv = lambda *a, **kw: ConvLayerParams.create(rng, *a, gain=leaky_relu_gain(c.leaky_slope), **kw)  # noqa: E731
        self.stem = conv(c.in_channels, c.stem_channels, 3, stride=2)
        self.group_a = self._group(rng, c.stem_channels)
        self.reduce_a = conv(self.group_a.out_channels, c.tap_channels, 1)
        self.down_a = conv(c.tap_channels, c.tap_channels, 3, stride=2)
        self.group_b = self._group(rng, c.tap_channels)
        self.reduce_b = conv(self.group_b.out_channels, c.tap_channels, 1)
        self.down_b = conv(c.tap_channels, c.tap_channels, 3, stride=2)
        width = c.branch_channels * (2 + len(c.branch_rates))
        if c.parallel:
            self.context = ParallelAtrousBlock(rng, c.tap_channels, c.branch_channels, c.branch_rates, c.leaky_slope)
        else:
            self.context = SingleConvBlock(rng, c.tap_channels, width, c.leaky_slope)
        self.down_c = conv(width, width, 3, stride=2)
        self.reduce_c = conv(width, c.tap_channels, 1)

    def _group(self, rng, in_ch):
        c = self.config
        if c.dense:
            return DenseGroup(rng, in_ch, c.growth, c.unit_rates, c.leaky_slope)
        return PlainGroup(rng, in_ch, len(c.unit_rates), c.leaky_slope)

    def __call__(self, image: Tensor) -> EncoderTaps:
        x = image if image.ndim == 4 else ops.reshape(image, (1,) + image.shape)
        h, w = x.shape[2:]
        if h % 16 or w % 16:
            raise ValueError(f"image extents must be divisible by 16, got {h}x{w}")
        act = lambda t: ops.leaky_relu(t, self.config.leaky_slope)  # noqa: E731
        x = act(self.stem(x))
        x = self.group_a(x)
        low = act(self.down_a(act(self.reduce_a(x))))
        x = self.group_b(low)
        x = act(self.down_b(act(self.reduce_b(x))))
        x = self.context(x)
        high = act(self.reduce_c(act(self.down_c(x))))
        return EncoderTaps(low=low, high=high)


def cnn_stream_forward(image: Tensor, stream: CnnStream) -> EncoderTaps:
    return stream(image)
