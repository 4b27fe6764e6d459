import numpy as np
import pytest

from cpelab import kernels
from cpelab.numkit import RngStream

IMPLS = kernels.implementations()
needs_ext = pytest.mark.skipif("cython" not in IMPLS, reason="compiled extension not built")


def test_backend_name_is_known():
    assert kernels.BACKEND in ("python", "cython")


@needs_ext
@pytest.mark.parametrize("shape", [(1, 1), (3, 5), (8, 8), (16, 2)])
def test_backends_agree_on_softmax_and_logistic(shape):
    rng = RngStream(3, 0)
    m = np.ascontiguousarray(rng.normal(shape) * 20)
    g = np.ascontiguousarray(rng.normal(shape))
    py, cy = IMPLS["python"], IMPLS["cython"]
    s = py.softmax_columns(m)
    assert np.allclose(cy.softmax_columns(m), s, rtol=1e-14, atol=1e-300)
    assert np.allclose(cy.softmax_columns_backward(s, g), py.softmax_columns_backward(s, g), rtol=1e-12, atol=1e-15)
    assert np.allclose(cy.logistic(m), py.logistic(m), rtol=1e-14, atol=1e-300)


@needs_ext
def test_backends_agree_on_power_iteration():
    rng = RngStream(4, 0)
    w = np.ascontiguousarray(rng.normal((7, 5)))
    x0 = np.ones(5) / np.sqrt(5)
    a = IMPLS["python"].power_iteration(w, x0, 1e-13, 5000)
    b = IMPLS["cython"].power_iteration(w, x0, 1e-13, 5000)
    assert a[3] and b[3]
    assert a[0] == pytest.approx(b[0], rel=1e-12)


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_logistic_is_stable_at_extremes(name):
    x = np.array([[-800.0, -30.0, 0.0, 30.0, 800.0]])
    out = IMPLS[name].logistic(x)
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 0.0 and out[0, 2] == 0.5 and out[0, 4] == 1.0


def test_use_backend_switches_and_restores():
    before = kernels.BACKEND
    prev = kernels.use_backend("python")
    assert kernels.BACKEND == "python" and prev == before
    kernels.use_backend(before)
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")
