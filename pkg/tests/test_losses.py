import itertools

import numpy as np
import pytest

from cloudcorr import autodiff as ad
from cloudcorr import losses
from cloudcorr.autodiff import Tensor, backward
from cloudcorr.losses import (
    LossWeights,
    gt_matrix,
    loss_chamfer,
    loss_mfd,
    loss_perm,
    loss_rec,
    loss_supervised,
    loss_total,
)
from cloudcorr.pointcloud import ContractError, knn_indices

from conftest import gradcheck


def _perm_matrix(order):
    n = len(order)
    p = np.zeros((n, n))
    p[np.arange(n), order] = 1.0
    return p


# ---------------------------------------------------------------------------
# reconstruction


def test_loss_rec_zero_on_exact_reconstruction(rng):
    a = rng.normal(size=(5, 3))
    b = rng.normal(size=(5, 3))
    assert loss_rec(a, Tensor(a.copy()), b, Tensor(b.copy())).item() == 0.0


def test_loss_rec_six_unit_squares():
    a = np.zeros((2, 3))
    b = np.ones((2, 3))
    out = loss_rec(a, Tensor(np.ones((2, 3))), b, Tensor(b.copy()))
    assert out.item() == pytest.approx(6.0, abs=1e-12)


def test_loss_rec_gradient_is_two_times_residual(rng):
    a = rng.normal(size=(4, 3))
    a_rec = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = rng.normal(size=(4, 3))
    backward(loss_rec(a, a_rec, b, Tensor(b.copy())))
    assert np.allclose(a_rec.grad, 2.0 * (a_rec.data - a), atol=1e-12)


# ---------------------------------------------------------------------------
# permutation regularizer


def test_loss_perm_zero_on_permutations(rng):
    for _ in range(10):
        p = Tensor(_perm_matrix(rng.permutation(6)))
        assert loss_perm(p).item() == 0.0


def test_loss_perm_uniform_matrix_equals_n_minus_one():
    for n in (2, 4, 7):
        p = Tensor(np.full((n, n), 1.0 / n))
        assert loss_perm(p).item() == pytest.approx(n - 1.0, abs=1e-12)


def test_loss_perm_nonnegative_and_detects_row_stochastic_non_orthogonal(rng):
    for _ in range(20):
        p = Tensor(rng.dirichlet(np.ones(5), size=5))
        assert loss_perm(p).item() >= 1e-2


def test_loss_perm_rejects_non_square():
    with pytest.raises(ad.ShapeError):
        loss_perm(Tensor(np.zeros((3, 4))))


# ---------------------------------------------------------------------------
# local geometry regularizer


def test_loss_mfd_identity_on_self_pair(rng):
    # A = B, P = I: every term is ||a_i - a_k||^2/||a_i - a_k||^2 = 1
    pts = rng.normal(size=(9, 3))
    k = 3
    out = loss_mfd(Tensor(np.eye(9)), pts, pts, k)
    assert out.item() == pytest.approx(9 * k * 2, rel=1e-12)


def test_loss_mfd_uniform_rows_kill_first_summand(rng):
    a = rng.normal(size=(6, 3))
    b = rng.normal(size=(6, 3))
    p_uniform = np.full((6, 6), 1.0 / 6.0)
    out_first = losses._neighbor_term(ad.matmul(Tensor(p_uniform), Tensor(b)), a, 2)
    assert out_first.item() == pytest.approx(0.0, abs=1e-20)


def _mfd_oracle(p, a, b, k):
    """Direct per-term evaluation of the local geometry sum."""
    n = len(a)
    total = 0.0
    idx_a = knn_indices(a, a, k, exclude_self=True)
    idx_b = knn_indices(b, b, k, exclude_self=True)
    pb = p @ b
    pta = p.T @ a
    for i in range(n):
        for kk in idx_a[i]:
            total += np.sum((pb[i] - pb[kk]) ** 2) / max(np.sum((a[i] - a[kk]) ** 2), 1e-8)
        for s in idx_b[i]:
            total += np.sum((pta[i] - pta[s]) ** 2) / max(np.sum((b[i] - b[s]) ** 2), 1e-8)
    return total


def test_loss_mfd_matches_direct_oracle(rng):
    a = rng.normal(size=(8, 3))
    b = rng.normal(size=(8, 3))
    p = rng.dirichlet(np.ones(8), size=8)
    assert loss_mfd(Tensor(p), a, b, 3).item() == pytest.approx(_mfd_oracle(p, a, b, 3), rel=1e-10)


def test_loss_mfd_ground_truth_minimizes_over_all_permutations(rng):
    # 6-point instance: B is a shuffled rigid copy of A; the shuffle's inverse
    # is the neighborhood-preserving permutation, checked against all 720
    from cloudcorr.pointcloud import PointCloud, random_blob, synth_rigid_pair

    base = random_blob(6, rng)
    pair = synth_rigid_pair(base, seed=77)
    a, b = pair.source.points, pair.target.points
    k = 2
    values = {}
    for perm in itertools.permutations(range(6)):
        values[perm] = loss_mfd(Tensor(_perm_matrix(perm)), a, b, k).item()
    best = min(values, key=values.get)
    assert best == tuple(pair.gt)
    assert values[best] == pytest.approx(6 * k * 2, rel=1e-9)  # rigid pairs keep ratios at 1


def test_loss_mfd_duplicate_points_survive_denominator_floor(rng):
    a = rng.normal(size=(5, 3))
    a[1] = a[0]  # duplicate → zero denominator floored
    out = loss_mfd(Tensor(np.eye(5)), a, a.copy(), 2)
    assert np.isfinite(out.item())


# ---------------------------------------------------------------------------
# total


def test_loss_total_reduces_to_rec_when_weights_zero(rng):
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    a_rec = Tensor(rng.normal(size=(6, 3)))
    b_rec = Tensor(rng.normal(size=(6, 3)))
    p = Tensor(rng.dirichlet(np.ones(6), size=6))
    w0 = LossWeights(lambda1=0.0, lambda2=0.0, k_mfd=2)
    assert loss_total(a, b, a_rec, b_rec, p, w0).item() == loss_rec(a, a_rec, b, b_rec).item()


def test_loss_total_default_weights_match_published_values():
    w = LossWeights()
    assert w.lambda1 == 0.1
    assert w.lambda2 == 0.01


def test_loss_total_combines_terms(rng):
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    a_rec, b_rec = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 3)))
    p = Tensor(rng.dirichlet(np.ones(5), size=5))
    w = LossWeights(lambda1=0.1, lambda2=0.01, k_mfd=2)
    expected = (
        loss_rec(a, a_rec, b, b_rec).item()
        + 0.1 * loss_perm(p).item()
        + 0.01 * loss_mfd(p, a, b, 2).item()
    )
    assert loss_total(a, b, a_rec, b_rec, p, w).item() == pytest.approx(expected, rel=1e-12)


def test_loss_total_nonnegative(rng):
    for _ in range(10):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        a_rec, b_rec = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 3)))
        p = Tensor(rng.dirichlet(np.ones(5), size=5))
        assert loss_total(a, b, a_rec, b_rec, p, LossWeights(k_mfd=2)).item() >= 0.0


def test_loss_total_gradient_wrt_p_and_reconstructions(rng):
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    w = LossWeights(lambda1=0.1, lambda2=0.01, k_mfd=2)

    def f(ts):
        p_soft = ad.row_softmax(ts[0])
        return loss_total(a, b, ts[1], ts[2], p_soft, w)

    gradcheck(f, [rng.normal(size=(5, 5)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))])


# ---------------------------------------------------------------------------
# chamfer


def _chamfer_oracle(x, y):
    fwd = np.mean([min(np.sum((xi - yj) ** 2) for yj in y) for xi in x])
    bwd = np.mean([min(np.sum((yj - xi) ** 2) for xi in x) for yj in y])
    return fwd + bwd


def test_loss_chamfer_zero_on_identical_sets(rng):
    x = rng.normal(size=(7, 3))
    assert loss_chamfer(x, x.copy()).item() == 0.0


def test_loss_chamfer_permutation_invariant(rng):
    x = rng.normal(size=(6, 3))
    y = rng.normal(size=(6, 3))
    ref = loss_chamfer(x, y).item()
    for _ in range(5):
        assert loss_chamfer(x[rng.permutation(6)], y[rng.permutation(6)]).item() == pytest.approx(
            ref, rel=1e-12
        )


def test_loss_chamfer_matches_brute_force(rng):
    for _ in range(20):
        x = rng.normal(size=(int(rng.integers(3, 9)), 3))
        y = rng.normal(size=(int(rng.integers(3, 9)), 3))
        assert loss_chamfer(x, y).item() == pytest.approx(_chamfer_oracle(x, y), rel=1e-12)


def test_loss_chamfer_gradient(rng):
    x = rng.normal(size=(6, 3))
    y = rng.normal(size=(6, 3))
    gradcheck(lambda ts: loss_chamfer(ts[0], ts[1]), [x, y])


# ---------------------------------------------------------------------------
# supervised


def test_loss_supervised_zero_on_exact_match(rng):
    gt = rng.permutation(6)
    p = Tensor(gt_matrix(gt, 6))
    assert loss_supervised(p, gt).item() == 0.0


def test_loss_supervised_uniform_value():
    # n=4 uniform: 12 wrong entries at (1/4)^2 plus 4 right at (3/4)^2 = 3
    p = Tensor(np.full((4, 4), 0.25))
    for gt in ([0, 1, 2, 3], [2, 0, 3, 1]):
        assert loss_supervised(p, np.array(gt)).item() == pytest.approx(3.0, abs=1e-12)


def test_loss_supervised_monotone_in_correct_mass():
    gt = np.array([1, 0])
    closer = Tensor(np.array([[0.2, 0.8], [0.8, 0.2]]))
    farther = Tensor(np.array([[0.4, 0.6], [0.6, 0.4]]))
    assert loss_supervised(closer, gt).item() < loss_supervised(farther, gt).item()


def test_loss_supervised_rejects_non_bijection():
    p = Tensor(np.full((3, 3), 1 / 3))
    with pytest.raises(ContractError):
        loss_supervised(p, np.array([0, 0, 2]))
