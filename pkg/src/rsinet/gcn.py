"""Graph-convolution stream over superpixel nodes.

Each layer re-learns its adjacency from the current node features, masked to
regions that touch, then propagates ``sigma(D^-1/2 A D^-1/2 H W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .nn import ops
from .nn.layers import Linear, Module, glorot_uniform, leaky_relu_gain
from .nn.tensor import Tensor, make_result
from .superpixel import SuperpixelMap, adjacency_mask, association_matrix, graph_decode, graph_encode


@dataclass(frozen=True)
class GcnStreamConfig:
    in_channels: int = 3
    projection_dim: int = 128
    layer_dims: tuple[int, ...] = (256, 256)
    activation: str = "leaky_relu"
    leaky_slope: float = 0.01
    separate_similarity: bool = False


@dataclass
class GraphInputs:
    """Per-image constants the stream needs: association matrices and adjacency mask."""

    q: sparse.csr_matrix
    q_norm: sparse.csr_matrix
    mask: np.ndarray
    height: int
    width: int

    @classmethod
    def from_superpixels(cls, spmap: SuperpixelMap, connectivity: int = 4) -> "GraphInputs":
        q, q_norm = association_matrix(spmap)
        return cls(q, q_norm, adjacency_mask(spmap, connectivity), spmap.height, spmap.width)


def _symmetric_gram(e: Tensor) -> Tensor:
    """``(E E^T + (E E^T)^T) / 2``, exactly symmetric in floating point."""
    p = e.data @ e.data.T
    out = 0.5 * (p + p.T)
    return make_result(out, (e,), lambda g: ((g + g.T) @ e.data,))


def learned_adjacency(h_prev: Tensor, weight: Tensor, mask: np.ndarray) -> Tensor:
    """``Sigmoid((H W)(H W)^T) * M + I`` for an already row-normalised ``H``."""
    z = h_prev.shape[0]
    if weight.ndim != 2 or h_prev.ndim != 2 or h_prev.shape[1] != weight.shape[0]:
        raise ValueError(f"learned_adjacency shape mismatch: {h_prev.shape} @ {weight.shape}")
    if mask.shape != (z, z):
        raise ValueError(f"mask shape {mask.shape} does not match {z} nodes")
    e = ops.matmul(h_prev, weight)
    affinity = ops.mul(ops.sigmoid(_symmetric_gram(e)), Tensor(mask))
    return ops.add(affinity, Tensor(np.eye(z)))


normalize_adjacency = ops.normalize_adjacency


class GcnLayerParams(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, activation: str = "leaky_relu",
                 separate_similarity: bool = False, slope: float = 0.01):
        gain = leaky_relu_gain(slope) if activation == "leaky_relu" else 1.0
        self.weight = glorot_uniform(rng, (d_in, d_out), d_in, d_out, gain)
        self.similarity = glorot_uniform(rng, (d_in, d_out), d_in, d_out) if separate_similarity else None
        self.activation = activation

    def similarity_weight(self) -> Tensor:
        return self.weight if self.similarity is None else self.similarity


def gcn_layer(h: Tensor, params: GcnLayerParams, a_norm: Tensor, slope: float = 0.01) -> Tensor:
    if h.ndim != 2 or h.shape[1] != params.weight.shape[0] or a_norm.shape != (h.shape[0],) * 2:
        raise ValueError(f"gcn_layer shape mismatch: H {h.shape}, W {params.weight.shape}, A {a_norm.shape}")
    return ops.activation(ops.matmul(ops.matmul(a_norm, h), params.weight), params.activation, slope)


class GcnStream(Module):
    def __init__(self, rng: np.random.Generator, config: GcnStreamConfig = GcnStreamConfig()):
        self.config = config
        self.projection = Linear(rng, config.in_channels, config.projection_dim)
        dims = (config.projection_dim,) + tuple(config.layer_dims)
        self.layers = [
            GcnLayerParams(rng, d_in, d_out, config.activation, config.separate_similarity, config.leaky_slope)
            for d_in, d_out in zip(dims[:-1], dims[1:])
        ]

    @property
    def out_channels(self) -> int:
        return self.config.layer_dims[-1]

    def nodes(self, image: Tensor, graph: GraphInputs) -> list[Tensor]:
        """Node features after the projection and after each layer."""
        h = self.projection(graph_encode(image, graph.q_norm))
        states = [h]
        for layer in self.layers:
            adj = learned_adjacency(ops.l2_normalize_rows(h), layer.similarity_weight(), graph.mask)
            h = gcn_layer(h, layer, normalize_adjacency(adj), self.config.leaky_slope)
            states.append(h)
        return states

    def __call__(self, image: Tensor, graph: GraphInputs) -> Tensor:
        return graph_decode(self.nodes(image, graph)[-1], graph.q, graph.height, graph.width)


def gcn_stream_forward(image: Tensor, spmap: SuperpixelMap, stream: GcnStream) -> Tensor:
    """``[C, H, W]`` image to a ``[D, H, W]`` raster of decoded node features."""
    if (spmap.height, spmap.width) != image.shape[1:]:
        raise ValueError(f"superpixel map {spmap.labels.shape} does not match image {image.shape}")
    return stream(image, GraphInputs.from_superpixels(spmap))
