"""Hierarchical point-wise feature extraction.

A stack of edge convolutions: per point, the k nearest neighbors are found in
the *current* feature space, each (center, neighbor - center) pair goes
through a shared linear + leaky-relu map, and the results are max-pooled over
the neighbors. After the last layer a global shape vector is formed by
concatenating max- and mean-pooled point features and projecting back to the
feature width. Pointwise features are row-equivariant; the global vector is
permutation invariant.

Neighbor indices are recomputed per layer but treated as constants for
differentiation (no gradient flows through neighbor selection).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pointcloud import ContractError, PointCloud, knn_indices


@dataclass(eq=False)
class EdgeConvLayer:
    """One edge convolution: linear map on (f_i, f_j - f_i) pairs, max over k neighbors."""

    weight: Tensor  # (2*d_in, d_out)
    bias: Tensor  # (d_out,)
    k: int

    @property
    def d_in(self) -> int:
        return self.weight.shape[0] // 2

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass(eq=False)
class EmbeddingParams:
    layers: list[EdgeConvLayer] = field(default_factory=list)
    proj_weight: Tensor = None  # (2d, d) pooled-concat -> global vector
    proj_bias: Tensor = None  # (d,)


@dataclass(eq=False)
class FeatureSet:
    """Per-point features (n, d) plus the permutation-invariant global vector (1, d)."""

    pointwise: Tensor
    global_vec: Tensor


LEAKY_SLOPE = 0.2


def init_embedding_params(
    rng: np.random.Generator, layers: int = 3, feature_dim: int = 96, k: int = 10
) -> EmbeddingParams:
    """Stack widths 3 -> 64 -> ... -> feature_dim with a 2d -> d global projection."""
    if layers < 1:
        raise ContractError(f"need at least one edge-conv layer, got {layers}")
    widths = [3] + [64] * (layers - 1) + [feature_dim]
    convs = [
        EdgeConvLayer(
            weight=ad.glorot_uniform(rng, 2 * widths[i], widths[i + 1]),
            bias=ad.zeros_param(widths[i + 1]),
            k=k,
        )
        for i in range(layers)
    ]
    return EmbeddingParams(
        layers=convs,
        proj_weight=ad.glorot_uniform(rng, 2 * feature_dim, feature_dim),
        proj_bias=ad.zeros_param(feature_dim),
    )


def edgeconv_forward(layer: EdgeConvLayer, feats: Tensor) -> Tensor:
    """Run one edge convolution over (n, d_in) features, giving (n, d_out)."""
    n = feats.shape[0]
    if layer.k >= n:
        raise ContractError(f"edge conv needs k < n, got k={layer.k}, n={n}")
    idx = knn_indices(feats.data, feats.data, layer.k, exclude_self=True)
    centers = ad.repeat_each_row(feats, layer.k)
    neighbors = ad.gather_rows(feats, idx.ravel())
    edge = ad.concat_cols(centers, ad.sub(neighbors, centers))
    hidden = ad.leaky_relu(ad.add(ad.matmul(edge, layer.weight), layer.bias), LEAKY_SLOPE)
    return ad.group_max(hidden, layer.k)


def embed(cloud, params: EmbeddingParams) -> FeatureSet:
    """Embed one cloud: raw coordinates in, FeatureSet out.

    Accepts a PointCloud or an (n, 3) Tensor (expected normalized).
    """
    x = cloud if isinstance(cloud, Tensor) else Tensor(cloud.points)
    for layer in params.layers:
        x = edgeconv_forward(layer, x)
    pooled = ad.concat_cols(ad.col_max(x), ad.col_mean(x))  # (1, 2d)
    v = ad.add(ad.matmul(pooled, params.proj_weight), params.proj_bias)
    return FeatureSet(pointwise=x, global_vec=v)
