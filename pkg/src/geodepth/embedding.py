"""Geometry-aware point embeddings via stacked dynamic-graph edge convolutions.

Each edge-convolution layer rebuilds its k-NN graph from the layer's own
input features (the first layer from raw 3D coordinates), applies a shared
linear map to every [center, neighbor - center] pair, normalizes and
rectifies it per edge, and takes a channel-wise max over each point's
neighborhood. Layer outputs are concatenated across depths and reduced by a
shared per-point linear map; appending each point's raw metric depth yields
the final embedding (16 structural channels + 1 depth channel = 17 by
default).

Forward evaluation is a pure function of (input, parameters, frozen running
stats); training updates running stats and must be serialized externally.
Parameters persist through the checkpoint format under the ``dgr.`` prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import PointSet, SparseFeatureMap
from .errors import ConfigError, ContractError, EmptyInputError, ShapeError
from .graph import knn_graph


@dataclass(frozen=True)
class DgrConfig:
    """Shape of the edge-convolution stack."""

    layer_dims: tuple = (64, 64, 128, 256)
    k: int = 9
    embed_dim: int = 16

    def __post_init__(self):
        if not self.layer_dims:
            raise ConfigError("layer_dims must be non-empty")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")

    @property
    def depth(self) -> int:
        return len(self.layer_dims)

    @property
    def concat_dim(self) -> int:
        return int(sum(self.layer_dims))

    @property
    def out_channels(self) -> int:
        # structural channels plus the raw depth channel
        return self.embed_dim + 1


@dataclass
class GeometricEmbedding:
    """Per-point feature rows; the last channel is the point's metric depth."""

    per_point: ad.Tensor  # [N, embed_dim + 1]

    @property
    def n(self) -> int:
        return self.per_point.shape[0]

    @property
    def channels(self) -> int:
        return self.per_point.shape[1]


class EdgeConvLayer:
    """One shared-weight edge convolution with its own dynamic graph.

    The shared map consumes exactly [center ++ (neighbor - center)], i.e.
    width 2 * Din, and is followed by batch normalization over the edge
    population and a ReLU.
    """

    def __init__(self, prefix: str, din: int, dout: int, k: int, rng: np.random.Generator):
        self.din = din
        self.dout = dout
        self.k = k
        self.weight = ad.Parameter(
            f"{prefix}.weight", ad.kaiming_uniform((2 * din, dout), fan_in=2 * din, rng=rng)
        )
        self.bn_gain = ad.Parameter(f"{prefix}.bn.gain", np.ones(dout, dtype=ad.default_dtype()))
        self.bn_shift = ad.Parameter(f"{prefix}.bn.shift", np.zeros(dout, dtype=ad.default_dtype()))
        self.bn_state = ad.BatchNormState(dout)
        self._prefix = prefix

    def parameters(self):
        return [self.weight, self.bn_gain, self.bn_shift]

    def stats(self):
        return {f"{self._prefix}.bn": self.bn_state}


def edgeconv_forward(feats: ad.Tensor, layer: EdgeConvLayer, mode: str) -> ad.Tensor:
    """Run one edge convolution, rebuilding the graph from ``feats`` itself."""
    n, din = feats.shape
    if din != layer.din:
        raise ShapeError(f"edgeconv: {din}-channel input into a {layer.din}-channel layer")
    nbrs = knn_graph(feats.data, layer.k)
    center_index = np.broadcast_to(np.arange(n)[:, None], (n, nbrs.k))
    center = ad.gather_rows(feats, center_index)
    neighbor = ad.gather_rows(feats, nbrs.indices)
    edge = ad.concat([center, ad.sub(neighbor, center)], axis=2)  # [N, k, 2*Din]
    h = ad.reshape(edge, (n * nbrs.k, 2 * din))
    h = ad.linear(h, layer.weight)
    h = ad.batch_norm(h, layer.bn_gain, layer.bn_shift, layer.bn_state, mode)
    h = ad.relu(h)
    h = ad.reshape(h, (n, nbrs.k, layer.dout))
    out, _ = ad.max_over_neighbors(h)
    return out


class DgrModule:
    """The full dynamic-graph stack plus the multi-depth reduction."""

    def __init__(self, config: DgrConfig, rng: np.random.Generator, prefix: str = "dgr"):
        self.config = config
        self.layers = []
        din = 3
        for i, dout in enumerate(config.layer_dims):
            self.layers.append(EdgeConvLayer(f"{prefix}.layer{i}", din, dout, config.k, rng))
            din = dout
        cat = config.concat_dim
        self.reduce_weight = ad.Parameter(
            f"{prefix}.reduce.weight", ad.kaiming_uniform((cat, config.embed_dim), fan_in=cat, rng=rng)
        )
        self.reduce_bn_gain = ad.Parameter(
            f"{prefix}.reduce.bn.gain", np.ones(config.embed_dim, dtype=ad.default_dtype())
        )
        self.reduce_bn_shift = ad.Parameter(
            f"{prefix}.reduce.bn.shift", np.zeros(config.embed_dim, dtype=ad.default_dtype())
        )
        self.reduce_bn_state = ad.BatchNormState(config.embed_dim)
        self._prefix = prefix

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        out.extend([self.reduce_weight, self.reduce_bn_gain, self.reduce_bn_shift])
        return out

    def stats(self):
        out = {}
        for layer in self.layers:
            out.update(layer.stats())
        out[f"{self._prefix}.reduce.bn"] = self.reduce_bn_state
        return out


def dgr_embed(points: PointSet, module: DgrModule, mode: str) -> GeometricEmbedding:
    """Embed every point: stacked edge convolutions, concat, reduce, + depth.

    The first graph is built on raw 3D coordinates; each later layer builds
    its own graph from the features it receives.
    """
    if points.n < 2:
        raise EmptyInputError(f"dgr_embed needs at least 2 points, got {points.n}")
    feats = ad.Tensor(points.coords, dtype=ad.default_dtype())
    per_layer = []
    for layer in module.layers:
        feats = edgeconv_forward(feats, layer, mode)
        per_layer.append(feats)
    stacked = ad.concat(per_layer, axis=1)  # [N, sum(layer_dims)]
    reduced = ad.linear(stacked, module.reduce_weight)
    reduced = ad.batch_norm(
        reduced, module.reduce_bn_gain, module.reduce_bn_shift, module.reduce_bn_state, mode
    )
    reduced = ad.relu(reduced)
    depth_channel = ad.Tensor(points.depth[:, None], dtype=ad.default_dtype())
    return GeometricEmbedding(ad.concat([reduced, depth_channel], axis=1))


def embed_to_map(emb: GeometricEmbedding, points: PointSet, height: int, width: int) -> SparseFeatureMap:
    """Scatter the per-point embedding back onto the source pixel grid.

    The returned map keeps the autodiff tensor alive so training gradients
    flow from the grid back into the embedding.
    """
    if emb.n != points.n:
        raise ShapeError(f"embed_to_map: {emb.n} embeddings for {points.n} points")
    u, v = points.pixel[:, 0], points.pixel[:, 1]
    if points.n:
        if u.min() < 0 or u.max() >= width or v.min() < 0 or v.max() >= height:
            raise ShapeError("embed_to_map: provenance pixel outside the target map")
        if np.unique(v * width + u).size != points.n:
            raise ContractError("embed_to_map: duplicate target pixels")
    values = ad.scatter_rows_to_grid(emb.per_point, v, u, height, width)
    valid = np.zeros((height, width), dtype=bool)
    valid[v, u] = True
    return SparseFeatureMap(values, valid)
