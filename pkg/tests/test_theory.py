import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpelab.attention import CALayer
from cpelab.errors import InvalidInputError
from cpelab.numkit import GmmSpec, RngStream
from cpelab.theory import (
    BoundDims,
    corollary1_closed_form,
    output_change,
    perturbation_bound,
    random_spec,
    run_all,
    theorem2_closed_form,
    verify_corollary1,
    verify_proposition1,
    verify_theorem1,
    verify_theorem2,
)


def test_zero_deltas_give_zero_change_and_bound():
    rng = RngStream(0, 0)
    layer = CALayer.random(rng, 6, 4, 4, 2, 5)
    zero = [np.zeros((2, 6))] * 2
    e, z = rng.normal((6, 5)), rng.uniform(-1, 1, 4)
    assert output_change(layer, zero, zero, z, e) == 0.0
    assert perturbation_bound(layer, zero, zero, e, 1.0, 1.0) == 0.0


def test_key_only_trials_hold():
    rep = verify_theorem1(BoundDims(d=6, d1=4, d2=4, heads=2, m=4), trials=300, seed=2, key_only_every=1)
    assert rep.violations == 0 and rep.max_ratio < 1.0


def test_bound_with_larger_data_bounds():
    rep = verify_theorem1(BoundDims(d=8, d1=4, d2=6, heads=3, m=6, m1=3.0, m2=2.0), trials=300, seed=3)
    assert rep.violations == 0


def test_zero_variance_reduces_to_mean_term():
    rng = RngStream(1, 0)
    means = rng.normal((2, 4, 3))
    spec = GmmSpec(np.array([0.3, 0.7]), means, np.zeros(2))
    dw = rng.normal((4, 4))
    expected = 0.3 * np.sum((dw @ means[0]) ** 2) + 0.7 * np.sum((dw @ means[1]) ** 2)
    assert np.isclose(theorem2_closed_form(spec, dw), expected, rtol=1e-13)
    # one mode and no noise: every draw is the mean
    rep = verify_theorem2(GmmSpec.single(means[0], 0.0), dw, samples=1000, seed=0)
    assert rep.max_rel_error < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 5.0))
def test_closed_form_is_linear_in_variance(scale):
    rng = RngStream(2, 0)
    spec = random_spec(rng, 4, 3, 2)
    dw = rng.normal((4, 4))
    at = lambda s: theorem2_closed_form(GmmSpec(spec.weights, spec.means, spec.sigmas * np.sqrt(s)), dw)
    base, one = at(0.0), at(1.0)
    assert np.isclose(at(scale), base + scale * (one - base), rtol=1e-11)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3.0, 3.0))
def test_projection_by_scaled_identity(c):
    rng = RngStream(3, 0)
    spec = random_spec(rng, 4, 3, 2)
    dw = rng.normal((4, 4))
    vs = [c * np.eye(3)] * 2
    assert np.isclose(corollary1_closed_form(spec, dw, vs), c * c * theorem2_closed_form(spec, dw), rtol=1e-12, atol=1e-12)


def test_zero_projection_gives_zero():
    rng = RngStream(4, 0)
    spec = random_spec(rng, 4, 3, 2)
    dw = rng.normal((4, 4))
    vs = [np.zeros((3, 3))] * 2
    assert corollary1_closed_form(spec, dw, vs) == 0.0
    assert verify_corollary1(spec, dw, vs, samples=500).details["estimate"] == 0.0
    with pytest.raises(InvalidInputError):
        corollary1_closed_form(spec, dw, vs[:1])


def test_oracle_gate_variants():
    rng = RngStream(5, 0)
    tar, rem = random_spec(rng, 4, 3, 2), random_spec(rng, 4, 3, 2)
    dw = rng.normal((4, 4))
    rep = verify_proposition1(tar, rem, dw, samples=5000)
    assert rep.details["remaining_estimate"] == 0.0 and rep.passed
    off = verify_proposition1(tar, rem, dw, samples=500, alpha=lambda t: 0.0)
    assert off.details["target_estimate"] == 0.0 and off.details["remaining_estimate"] == 0.0
    with pytest.raises(InvalidInputError):
        verify_proposition1(tar, random_spec(rng, 5, 3, 2), np.eye(4))


def test_run_all_small():
    reports = run_all(seed=1, bound_trials=50, instances=2, samples=20_000, dims=BoundDims(d=6, d1=4, d2=4, heads=2, m=4))
    assert set(reports) == {"theorem1", "theorem2", "corollary1", "proposition1"}
    assert all(r.passed for r in reports.values())
    assert reports["theorem2"].max_rel_error < 0.05
    with pytest.raises(InvalidInputError):
        BoundDims(d2=5, heads=2)
