"""Fused decoder: upsample the high tap, fuse with the low tap, restore, fuse with the graph raster."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ops
from .nn.layers import ConvLayerParams, Module, leaky_relu_gain
from .nn.tensor import Tensor


@dataclass(frozen=True)
class DecoderConfig:
    high_channels: int = 256
    low_channels: int = 256
    graph_channels: int = 256
    block1_channels: tuple[int, ...] = (256,) * 10
    block1_kernels: tuple[int, ...] = (3, 3, 3, 3, 5, 3, 3, 3, 3, 5)
    block1_strides: tuple[int, ...] = (2, 1, 1, 1, 1, 2, 1, 1, 1, 1)
    fusion_channels: int = 256
    block3_channels: tuple[int, ...] = (128,) * 9
    block3_kernels: tuple[int, ...] = (3,) * 9
    block3_strides: tuple[int, ...] = (2, 1, 1, 1, 1, 2, 1, 1, 1)
    n_classes: int = 6
    leaky_slope: float = 0.01

    def __post_init__(self):
        if len(self.block1_channels) != 10 or self.block1_strides.count(2) != 2:
            raise ValueError("block 1 needs 10 layers with exactly two stride-2 layers")
        if len(self.block3_channels) != 9 or self.block3_strides.count(2) != 2:
            raise ValueError("block 3 needs 9 layers with exactly two stride-2 layers")
        if not len(self.block1_kernels) == len(self.block1_strides) == 10:
            raise ValueError("block 1 kernel/stride schedules must have 10 entries")
        if not len(self.block3_kernels) == len(self.block3_strides) == 9:
            raise ValueError("block 3 kernel/stride schedules must have 9 entries")

    @property
    def restore_channels(self) -> int:
        return self.block3_channels[-1]


class DeconvStack(Module):
    """Transposed convolutions, each followed by Leaky ReLU."""

    def __init__(self, rng, in_ch: int, channels, kernels, strides, slope: float):
        self.layers = []
        for out_ch, k, s in zip(channels, kernels, strides):
            self.layers.append(ConvLayerParams.create(rng, in_ch, out_ch, k, stride=s, transposed=True,
                                                      gain=leaky_relu_gain(slope)))
            in_ch = out_ch
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = ops.leaky_relu(layer(x), self.slope)
        return x


def _batched(x: Tensor) -> Tensor:
    return x if x.ndim == 4 else ops.reshape(x, (1,) + x.shape)


class Decoder(Module):
    def __init__(self, rng: np.random.Generator, config: DecoderConfig = DecoderConfig()):
        c = config
        self.config = c
        self.block1 = DeconvStack(rng, c.high_channels, c.block1_channels, c.block1_kernels,
                                  c.block1_strides, c.leaky_slope)
        self.block2 = ConvLayerParams.create(rng, c.block1_channels[-1] + c.low_channels, c.fusion_channels, 1,
                                             gain=leaky_relu_gain(c.leaky_slope))
        self.block3 = DeconvStack(rng, c.fusion_channels, c.block3_channels, c.block3_kernels,
                                  c.block3_strides, c.leaky_slope)
        self.block4 = ConvLayerParams.create(rng, c.restore_channels + c.graph_channels, c.n_classes, 1)

    def block1_upsample(self, high: Tensor) -> Tensor:
        return self.block1(_batched(high))

    def block2_fuse(self, up: Tensor, low: Tensor) -> Tensor:
        up, low = _batched(up), _batched(low)
        if up.shape[2:] != low.shape[2:]:
            raise ValueError(f"block 2 extent mismatch: {up.shape} vs {low.shape}")
        return ops.leaky_relu(self.block2(ops.concat_channels([up, low])), self.config.leaky_slope)

    def block3_restore(self, fused: Tensor) -> Tensor:
        return self.block3(_batched(fused))

    def block4_logits(self, img: Tensor, graph: Tensor) -> Tensor:
        img, graph = _batched(img), _batched(graph)
        if img.shape[2:] != graph.shape[2:]:
            raise ValueError(f"block 4 extent mismatch: {img.shape} vs {graph.shape}")
        return self.block4(ops.concat_channels([img, graph]))

    def block4_fuse_classify(self, img: Tensor, graph: Tensor) -> Tensor:
        """Per-pixel class probabilities."""
        return ops.softmax(self.block4_logits(img, graph), axis=1)

    def __call__(self, high: Tensor, low: Tensor, graph: Tensor) -> Tensor:
        """Logits ``[N, classes, H, W]``."""
        restored = self.block3_restore(self.block2_fuse(self.block1_upsample(high), low))
        return self.block4_logits(restored, graph)
