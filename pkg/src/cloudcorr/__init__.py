"""Unsupervised dense correspondence between equal-size 3D point clouds.

The pipeline embeds both clouds with a stack of edge convolutions, turns the
pointwise features into a soft permutation matrix through inverse-distance
similarity and a single-pass sharpening normalizer, and drives its learning
by reconstructing each cloud from the permuted other one through a shared
per-point deformer.
"""

from .autodiff import Tensor, backward
from .pointcloud import PointCloud, ShapePair
from .embedding import FeatureSet, embed
from .indicator import CorrMatrix, SharpenConfig, quantize, sharpen, similarity, sinkhorn
from .deformer import reconstruct_both
from .losses import LossWeights, loss_chamfer, loss_mfd, loss_perm, loss_rec, loss_supervised, loss_total
from .training import ModelParams, TrainConfig, predict_indices, train
from .evaluation import CorrReport, corr_report, corr_strict, corr_tolerant, pseudo_cluster_correspond

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "PointCloud",
    "ShapePair",
    "FeatureSet",
    "embed",
    "CorrMatrix",
    "SharpenConfig",
    "quantize",
    "sharpen",
    "similarity",
    "sinkhorn",
    "reconstruct_both",
    "LossWeights",
    "loss_chamfer",
    "loss_mfd",
    "loss_perm",
    "loss_rec",
    "loss_supervised",
    "loss_total",
    "ModelParams",
    "TrainConfig",
    "predict_indices",
    "train",
    "CorrReport",
    "corr_report",
    "corr_strict",
    "corr_tolerant",
    "pseudo_cluster_correspond",
    "__version__",
]
