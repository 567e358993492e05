import numpy as np
import pytest

from cloudcorr import autodiff as ad


def central_diff(f, arrays, which, flat_index, step=1e-5):
    """Independent finite-difference oracle for d f / d arrays[which][flat_index]."""
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which].flat[flat_index] += step
    minus[which].flat[flat_index] -= step
    return (f(plus) - f(minus)) / (2.0 * step)


def gradcheck(f, arrays, rel_tol=1e-4, step=1e-5, floor=1e-4, max_coords=None, rng=None):
    """Compare analytic gradients of scalar f(list of arrays) against central differences.

    ``f`` receives plain numpy arrays and must build a fresh graph per call,
    returning a float. Analytic gradients come from one backward pass on
    tensors wrapping the same arrays. Coordinates with |grad| below ``floor``
    are compared absolutely at rel_tol * floor.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = f(tensors)
    assert isinstance(loss, ad.Tensor) and loss.data.size == 1
    ad.backward(loss)

    def numeric(arrs):
        fresh = [ad.Tensor(a) for a in arrs]
        return float(f(fresh).data)

    worst = 0.0
    for which, t in enumerate(tensors):
        size = t.data.size
        if max_coords is not None and size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(size, size=max_coords, replace=False)
        else:
            coords = range(size)
        for flat_index in coords:
            analytic = t.grad.flat[flat_index]
            fd = central_diff(numeric, arrays, which, flat_index, step)
            err = abs(analytic - fd) / max(abs(analytic), abs(fd), floor)
            worst = max(worst, err)
            assert err <= rel_tol, (
                f"gradient mismatch on input {which} coord {flat_index}: "
                f"analytic={analytic!r} fd={fd!r} rel_err={err:.3e}"
            )
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
