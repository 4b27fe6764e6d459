import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpelab.errors import ConvergenceError, InvalidInputError
from cpelab.numkit import (
    GmmSpec,
    RngStream,
    frobenius_norm,
    read_tensors,
    sample_gmm,
    sample_gmm_batch,
    sample_gmm_tokens,
    softmax_columns,
    spectral_norm,
    write_tensors,
)

from oracles import jacobi_singular_values, softmax_columns_loop

finite = st.floats(-30, 30, allow_nan=False)


def test_streams_are_reproducible_and_distinct():
    a = RngStream(5, 1).normal(10)
    b = RngStream(5, 1).normal(10)
    c = RngStream(5, 2).normal(10)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert np.array_equal(RngStream(5, 0).spawn(2).normal(3), RngStream(5, 2).normal(3))


def test_softmax_matches_scalar_loop():
    m = RngStream(0, 0).normal((6, 5)) * 4
    assert np.allclose(softmax_columns(m), softmax_columns_loop(m.tolist()), rtol=1e-13, atol=0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=finite))
def test_softmax_columns_are_distributions(m):
    s = softmax_columns(m)
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=0), 1.0)
    # shift invariance per column
    assert np.allclose(softmax_columns(m + 3.0), s)


def test_softmax_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        softmax_columns(np.array([[np.nan, 1.0]]))
    with pytest.raises(InvalidInputError):
        softmax_columns(np.ones(3))


def test_spectral_norm_identity_and_zero():
    assert spectral_norm(np.eye(4)) == pytest.approx(1.0, rel=1e-12)
    assert spectral_norm(np.zeros((3, 2))) == 0.0


def test_spectral_norm_matches_jacobi_oracle():
    rng = RngStream(1, 0)
    for shape in [(5, 3), (3, 7), (8, 8), (1, 4)]:
        w = rng.normal(shape)
        assert spectral_norm(w) == pytest.approx(jacobi_singular_values(w)[0], rel=1e-9)


def test_spectral_norm_escapes_orthogonal_start():
    # all-ones start is orthogonal to the top right singular vector
    w = np.diag([1.0, 3.0]) @ np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2)
    assert spectral_norm(w) == pytest.approx(3.0, rel=1e-9)


def test_spectral_norm_reports_non_convergence():
    w = np.diag([1.0, 0.999999])
    w = w @ np.array([[1.0, 0.3], [0.2, 1.0]])
    with pytest.raises(ConvergenceError) as info:
        spectral_norm(w, tol=1e-15, max_iters=3)
    assert info.value.estimate > 0


def test_gmm_spec_validation():
    with pytest.raises(InvalidInputError):
        GmmSpec(np.array([0.5, 0.6]), np.zeros((2, 2, 2)), np.ones(2))
    with pytest.raises(InvalidInputError):
        GmmSpec(np.array([1.0]), np.zeros((2, 2, 2)), np.ones(1))
    spec = GmmSpec.single(np.ones((2, 3)), 0.5)
    assert spec.n_modes == 1 and spec.d == 2 and spec.m == 3
    assert np.array_equal(spec.mean(), np.ones((2, 3)))


def test_zero_sigma_samples_are_means():
    spec = GmmSpec(np.array([0.25, 0.75]), RngStream(0, 3).normal((2, 3, 4)), np.zeros(2))
    rng = RngStream(0, 4)
    e = sample_gmm(spec, rng)
    assert any(np.array_equal(e, mu) for mu in spec.means)
    batch, modes = sample_gmm_batch(spec, rng, 50)
    assert np.array_equal(batch, spec.means[modes])


def test_per_token_modes_pick_token_columns():
    means = np.stack([np.zeros((2, 3)), np.ones((2, 3)) * np.arange(3)])
    spec = GmmSpec(np.array([0.5, 0.5]), means, np.zeros(2))
    e, modes = sample_gmm_tokens(spec, RngStream(2, 0), 40)
    for n in range(40):
        for i in range(3):
            assert np.array_equal(e[n][:, i], means[modes[n, i]][:, i])
    assert 0 < modes.mean() < 1


def test_tensor_blob_round_trip(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "v": np.array([1.5, -2.0])}
    entries = write_tensors(tmp_path / "t.bin", tensors)
    assert [e["offset"] for e in entries] == [0, 48]
    back = read_tensors(tmp_path / "t.bin", entries)
    assert np.array_equal(back["a"], tensors["a"])
    assert np.array_equal(back["v"], tensors["v"][None, :])


def test_frobenius_norm():
    assert frobenius_norm(np.array([[3.0, 4.0]])) == 5.0
