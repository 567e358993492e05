"""Training objectives.

The unsupervised objective is a point-to-point reconstruction error plus two
regularizers on the soft correspondence P: an orthogonality term pushing P
toward a permutation matrix (killing one-to-many matches), and a local
geometry term asking neighboring points to stay neighbors after permutation.
A Chamfer-distance reconstruction and a direct supervised objective are kept
for the ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pointcloud import ContractError, is_bijection, knn_indices

EPS_DENOM = 1e-8  # floors squared point distances in the geometry term


@dataclass
class LossWeights:
    """Balance of the three unsupervised terms, plus the geometry neighbor count."""

    lambda1: float = 0.1
    lambda2: float = 0.01
    k_mfd: int = 10

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("loss weights must be non-negative")


def _const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _coords(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def loss_rec(a, a_rec, b, b_rec) -> Tensor:
    """Squared point-to-point reconstruction error of both directions."""
    return ad.add(
        ad.frobenius_sq(ad.sub(_const(a), a_rec)),
        ad.frobenius_sq(ad.sub(_const(b), b_rec)),
    )


def loss_perm(p: Tensor) -> Tensor:
    """||P P^T - I||_F^2: zero exactly on permutation matrices."""
    n = p.shape[0]
    if p.shape != (n, n):
        raise ad.ShapeError(f"loss_perm needs a square matrix, got {p.shape}")
    return ad.frobenius_sq(ad.sub(ad.matmul(p, ad.transpose(p)), np.eye(n)))


def _neighbor_term(mapped: Tensor, coords: np.ndarray, k: int) -> Tensor:
    """Sum over points and their k coordinate-space neighbors of
    ||mapped_i - mapped_k||^2 / ||x_i - x_k||^2 (denominator floored)."""
    n = coords.shape[0]
    idx = knn_indices(coords, coords, k, exclude_self=True)
    neighbors = idx.ravel()
    diff = ad.sub(ad.repeat_each_row(mapped, k), ad.gather_rows(mapped, neighbors))
    sq = ad.row_sum(ad.mul(diff, diff))  # (n*k, 1)
    denom = ((np.repeat(coords, k, axis=0) - coords[neighbors]) ** 2).sum(axis=1)[:, None]
    inv = 1.0 / np.maximum(denom, EPS_DENOM)
    return ad.total_sum(ad.mul(sq, inv))


def loss_mfd(p: Tensor, a, b, k_mfd: int) -> Tensor:
    """Local geometry term: rows of P map A-neighborhoods through B and
    columns map B-neighborhoods through A; both should shrink distances
    no faster than the original point spacing."""
    a_np, b_np = _coords(a), _coords(b)
    rows_through_b = ad.matmul(p, _const(b_np))  # row i = p_i B
    cols_through_a = ad.matmul(ad.transpose(p), _const(a_np))  # row i = p^i A
    return ad.add(
        _neighbor_term(rows_through_b, a_np, k_mfd),
        _neighbor_term(cols_through_a, b_np, k_mfd),
    )


def loss_total(a, b, a_rec, b_rec, p: Tensor, weights: LossWeights) -> Tensor:
    """Reconstruction + lambda1 * permutation + lambda2 * geometry."""
    total = loss_rec(a, a_rec, b, b_rec)
    if weights.lambda1 > 0:
        total = ad.add(total, ad.scale(loss_perm(p), weights.lambda1))
    if weights.lambda2 > 0:
        total = ad.add(total, ad.scale(loss_mfd(p, a, b, weights.k_mfd), weights.lambda2))
    return total


def loss_chamfer(x, y) -> Tensor:
    """Symmetric mean squared nearest-neighbor distance between two clouds.

    Nearest-neighbor indices are held constant for differentiation.
    """
    xt, yt = _const(x), _const(y)
    d2 = ((xt.data**2).sum(1)[:, None] + (yt.data**2).sum(1)[None, :] - 2.0 * xt.data @ yt.data.T)
    nearest_in_y = d2.argmin(axis=1)
    nearest_in_x = d2.argmin(axis=0)
    dx = ad.sub(xt, ad.gather_rows(yt, nearest_in_y))
    dy = ad.sub(yt, ad.gather_rows(xt, nearest_in_x))
    return ad.add(
        ad.scale(ad.frobenius_sq(dx), 1.0 / xt.shape[0]),
        ad.scale(ad.frobenius_sq(dy), 1.0 / yt.shape[0]),
    )


def gt_matrix(gt: np.ndarray, n: int) -> np.ndarray:
    """Binary matrix of a bijection: entry (i, gt[i]) = 1."""
    if not is_bijection(np.asarray(gt), n):
        raise ContractError("ground-truth correspondence is not a bijection")
    m = np.zeros((n, n))
    m[np.arange(n), np.asarray(gt, dtype=np.intp)] = 1.0
    return m


def loss_supervised(p: Tensor, gt) -> Tensor:
    """||P - P_gt||_F^2 against the binary ground-truth matrix."""
    return ad.frobenius_sq(ad.sub(p, gt_matrix(gt, p.shape[0])))
