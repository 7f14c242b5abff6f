"""Two-stream network assembly and its ablation variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cnn import CnnStream, CnnStreamConfig
from .decoder import Decoder, DecoderConfig
from .gcn import GcnStream, GcnStreamConfig, GraphInputs
from .nn import ops
from .nn.layers import Module
from .nn.tensor import Tensor

VARIANTS = ("full", "no_gcn", "no_parallel_atrous", "no_dense_atrous")

# Column labels used when tabulating ablations.
VARIANT_LABELS = {
    "full": "Full model",
    "no_gcn": "Without GCN",
    "no_parallel_atrous": "Without Atrous CNN",
    "no_dense_atrous": "Without DenseAtrousCNet",
}


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 6
    in_channels: int = 3
    variant: str = "full"
    width_mult: float = 1.0
    leaky_slope: float = 0.01
    separate_similarity: bool = False

    def width(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_mult)))


def _configs(cfg: ModelConfig) -> tuple[CnnStreamConfig, GcnStreamConfig, DecoderConfig]:
    w = cfg.width
    cnn = CnnStreamConfig(
        in_channels=cfg.in_channels,
        stem_channels=w(64),
        growth=w(64),
        tap_channels=w(256),
        branch_channels=w(64),
        dense=cfg.variant != "no_dense_atrous",
        parallel=cfg.variant != "no_parallel_atrous",
        leaky_slope=cfg.leaky_slope,
    )
    gcn = GcnStreamConfig(
        in_channels=cfg.in_channels,
        projection_dim=w(128),
        layer_dims=(w(256), w(256)),
        leaky_slope=cfg.leaky_slope,
        separate_similarity=cfg.separate_similarity,
    )
    dec = DecoderConfig(
        high_channels=w(256),
        low_channels=w(256),
        graph_channels=w(256),
        block1_channels=(w(256),) * 10,
        fusion_channels=w(256),
        block3_channels=(w(128),) * 9,
        n_classes=cfg.n_classes,
        leaky_slope=cfg.leaky_slope,
    )
    return cnn, gcn, dec


class RsiNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if config.variant not in VARIANTS:
            raise ValueError(f"unknown variant {config.variant!r}; choose from {VARIANTS}")
        self.config = config
        cnn_cfg, gcn_cfg, dec_cfg = _configs(config)
        self.cnn = CnnStream(rng, cnn_cfg)
        self.gcn = GcnStream(rng, gcn_cfg) if config.variant != "no_gcn" else None
        self.decoder = Decoder(rng, dec_cfg)
        self.graph_channels = dec_cfg.graph_channels

    @property
    def uses_graph(self) -> bool:
        return self.gcn is not None

    def graph_raster(self, image: Tensor, graph: GraphInputs | None) -> Tensor:
        h, w = image.shape[-2:]
        if self.gcn is None:
            return Tensor(np.zeros((1, self.graph_channels, h, w)))
        if graph is None:
            raise ValueError("the GCN stream needs superpixel graph inputs")
        raster = self.gcn(image, graph)
        return ops.reshape(raster, (1,) + raster.shape)

    def __call__(self, image: Tensor, graph: GraphInputs | None = None,
                 graph_raster: Tensor | None = None) -> Tensor:
        """Logits ``[1, classes, H, W]`` for one ``[C, H, W]`` image.

        ``graph_raster`` overrides the GCN output (used by ablation checks).
        """
        if image.ndim != 3:
            raise ValueError("RsiNet takes one [C, H, W] image at a time")
        taps = self.cnn(image)
        if graph_raster is None:
            graph_raster = self.graph_raster(image, graph)
        return self.decoder(taps.high, taps.low, graph_raster)

    def predict_proba(self, image: Tensor, graph: GraphInputs | None = None) -> Tensor:
        return ops.softmax(self(image, graph), axis=1)


def build_model(config: ModelConfig, seed: int = 0) -> RsiNet:
    """Glorot-initialised model; identical ``(config, seed)`` give identical weights."""
    return RsiNet(config, np.random.default_rng(seed))
