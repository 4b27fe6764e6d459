"""Numerical checks of the residual-perturbation bound and the mixture moment identities.

Each verifier returns a ``TrialReport``. The bound check counts trials whose
directly evaluated output change exceeds the coefficient-weighted bound; the
moment checks compare a closed form against a Monte-Carlo estimate.
"""

from dataclasses import asdict, dataclass, field
import math

import numpy as np

from .attention import CALayer, ca_forward, head_coefficients
from .errors import InvalidInputError
from .numkit import GmmSpec, RngStream, as_matrix, sample_gmm_batch, sample_gmm_tokens

BOUND_SLACK = 1e-9


@dataclass
class TrialReport:
    name: str
    trials: int
    violations: int = 0
    max_ratio: float = 0.0  # bound checks: largest lhs / rhs
    max_rel_error: float = 0.0  # moment checks
    seed: int = 0
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.violations > self.trials:
            raise InvalidInputError("violations cannot exceed trials")

    @property
    def passed(self):
        return self.violations == 0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class BoundDims:
    d: int = 16
    d1: int = 8
    d2: int = 8
    heads: int = 2
    m: int = 8
    m1: float = 1.0
    m2: float = 1.0

    def __post_init__(self):
        if min(self.d, self.d1, self.d2, self.heads, self.m) < 1 or self.d2 % self.heads:
            raise InvalidInputError(f"invalid dimensions {self}")
        if self.m1 <= 0 or self.m2 <= 0:
            raise InvalidInputError("m1 and m2 must be positive")


def perturbation_bound(layer, dk, dv, e, m1, m2):
    """Sum over heads of ``c1 * ||dWk E||_F + c2 * ||dWv E||_F``."""
    c1, c2 = head_coefficients(layer, m1, m2)
    total = 0.0
    for h in range(layer.heads):
        total += c1[h] * np.linalg.norm(dk[h] @ e) + c2[h] * np.linalg.norm(dv[h] @ e)
    return float(total)


def output_change(layer, dk, dv, z, e):
    return float(np.linalg.norm(ca_forward(layer.perturbed(dk, dv), z, e) - ca_forward(layer, z, e)))


def _random_embedding(rng, d, m, m1):
    """Gaussian draw rescaled to a spectral norm uniform in (0, m1]."""
    e = rng.normal((d, m))
    target = m1 * (1.0 - rng.uniform())  # in (0, m1]
    return e * (target / np.linalg.norm(e, 2))


def _random_delta(rng, rows, cols):
    scale = 10.0 ** rng.uniform(-3.0, 0.0)
    return scale * rng.normal((rows, cols)) / math.sqrt(cols)


def verify_theorem1(dims=BoundDims(), trials=10_000, seed=0, key_only_every=0):
    """Randomized check of the key/value perturbation bound.

    Every trial draws a fresh layer, per-head deltas, an embedding with
    spectral norm at most ``m1`` and a query with sup-norm at most ``m2``.
    With ``key_only_every = k > 0`` every k-th trial perturbs only the keys.
    """
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    rng = RngStream(seed, 31)
    dh = dims.d2 // dims.heads
    violations, worst = 0, 0.0
    worst_trial = None
    for t in range(trials):
        layer = CALayer.random(rng, dims.d, dims.d1, dims.d2, dims.heads, dims.m)
        dk = [_random_delta(rng, dh, dims.d) for _ in range(dims.heads)]
        dv = [_random_delta(rng, dh, dims.d) for _ in range(dims.heads)]
        if key_only_every and t % key_only_every == 0:
            dv = [np.zeros_like(w) for w in dv]
        e = _random_embedding(rng, dims.d, dims.m, dims.m1)
        z = rng.uniform(-dims.m2, dims.m2, dims.d1)
        lhs = output_change(layer, dk, dv, z, e)
        rhs = perturbation_bound(layer, dk, dv, e, dims.m1, dims.m2)
        if lhs > rhs * (1.0 + BOUND_SLACK):
            violations += 1
        ratio = lhs / rhs if rhs > 0 else 0.0
        if ratio > worst:
            worst, worst_trial = ratio, t
    return TrialReport(
        "theorem1",
        trials,
        violations,
        max_ratio=worst,
        seed=seed,
        details={"dims": asdict(dims), "slack": BOUND_SLACK, "worst_trial": worst_trial},
    )


# -- mixture second moments -----------------------------------------------------


def theorem2_closed_form(spec, dw):
    """``C3 ||dW||_F^2 + sum_r pi_r ||dW mu_r||_F^2`` with ``C3 = m * sum_r pi_r sigma_r^2``."""
    dw = as_matrix(dw, "dW")
    m = spec.m
    c3 = 0.0
    mean_term = 0.0
    for r in range(spec.n_modes):
        c3 += spec.weights[r] * spec.sigmas[r] ** 2 * m
        mean_term += spec.weights[r] * float(np.sum((dw @ spec.means[r]) ** 2))
    return float(c3 * float(np.sum(dw * dw)) + mean_term)


def corollary1_closed_form(spec, dw, vs):
    """``||dW||_F^2 sum_r pi_r sigma_r^2 ||V_r||_F^2 + sum_r pi_r ||dW mu_r V_r||_F^2``.

    The token count enters through ``||V_r||_F^2``; V_r = I gives the previous form.
    """
    dw = as_matrix(dw, "dW")
    if len(vs) != spec.n_modes:
        raise InvalidInputError("need one V per mixture mode")
    c3 = 0.0
    mean_term = 0.0
    for r in range(spec.n_modes):
        v = as_matrix(vs[r], "V")
        c3 += spec.weights[r] * spec.sigmas[r] ** 2 * float(np.sum(v * v))
        mean_term += spec.weights[r] * float(np.sum((dw @ spec.means[r] @ v) ** 2))
    return float(c3 * float(np.sum(dw * dw)) + mean_term)


def _chunks(total, size=20_000):
    done = 0
    while done < total:
        n = min(size, total - done)
        yield n
        done += n


def _rel_error(estimate, exact):
    if exact == 0.0:
        return abs(estimate)
    return abs(estimate - exact) / abs(exact)


def mc_theorem2(spec, dw, samples, rng):
    """Monte-Carlo mean of ``||dW E||_F^2`` with the mode drawn per token."""
    total = 0.0
    for n in _chunks(samples):
        e, _ = sample_gmm_tokens(spec, rng, n)
        total += float(np.sum(np.einsum("ij,njk->nik", dw, e) ** 2))
    return total / samples


def mc_corollary1(spec, dw, vs, samples, rng):
    """Monte-Carlo mean of ``||dW E V_r||_F^2``; the mode r of each draw is known."""
    total = 0.0
    for n in _chunks(samples):
        e, modes = sample_gmm_batch(spec, rng, n)
        proj = np.einsum("ij,njk->nik", dw, e)
        for r in range(spec.n_modes):
            sel = modes == r
            if np.any(sel):
                total += float(np.sum((proj[sel] @ vs[r]) ** 2))
    return total / samples


def verify_theorem2(spec, dw, samples=200_000, seed=0):
    if samples < 1:
        raise InvalidInputError("samples must be >= 1")
    exact = theorem2_closed_form(spec, dw)
    estimate = mc_theorem2(spec, np.asarray(dw, dtype=np.float64), samples, RngStream(seed, 32))
    err = _rel_error(estimate, exact)
    return TrialReport("theorem2", 1, 0, max_rel_error=err, seed=seed, details={"closed_form": exact, "estimate": estimate})


def verify_corollary1(spec, dw, vs, samples=200_000, seed=0):
    if samples < 1:
        raise InvalidInputError("samples must be >= 1")
    vs = [as_matrix(v, "V") for v in vs]
    exact = corollary1_closed_form(spec, dw, vs)
    estimate = mc_corollary1(spec, np.asarray(dw, dtype=np.float64), vs, samples, RngStream(seed, 33))
    err = _rel_error(estimate, exact)
    return TrialReport("corollary1", 1, 0, max_rel_error=err, seed=seed, details={"closed_form": exact, "estimate": estimate})


def verify_proposition1(spec_tar, spec_rem, dw, samples=200_000, seed=0, alpha=None):
    """Oracle gate: ``f(E) = alpha(E) I`` with alpha 1 on target draws and 0 on remaining ones.

    ``alpha(is_target)`` may be replaced, e.g. by a constant, to probe other gates.
    """
    if spec_tar.d != spec_rem.d or spec_tar.m != spec_rem.m:
        raise InvalidInputError("target and remaining specs must share (d, m)")
    alpha = alpha or (lambda is_target: 1.0 if is_target else 0.0)
    dw = as_matrix(dw, "dW")
    rng = RngStream(seed, 34)
    a_rem = alpha(False)
    a_tar = alpha(True)
    rem_total = 0.0
    tar_total = 0.0
    for n in _chunks(samples):
        e, _ = sample_gmm_tokens(spec_rem, rng, n)
        rem_total += float(np.sum((np.einsum("ij,njk->nik", dw, e) * a_rem) ** 2))
        e, _ = sample_gmm_tokens(spec_tar, rng, n)
        tar_total += float(np.sum((np.einsum("ij,njk->nik", dw, e) * a_tar) ** 2))
    rem_estimate = rem_total / samples
    tar_estimate = tar_total / samples
    # closed forms: the gate factors out of the expectation as alpha^2
    rem_exact = a_rem**2 * theorem2_closed_form(spec_rem, dw)
    tar_exact = a_tar**2 * theorem2_closed_form(spec_tar, dw)
    err = _rel_error(tar_estimate, tar_exact)
    violations = int(rem_estimate != rem_exact) if rem_exact == 0.0 else 0
    return TrialReport(
        "proposition1",
        1,
        violations,
        max_rel_error=err,
        seed=seed,
        details={
            "remaining_closed_form": rem_exact,
            "remaining_estimate": rem_estimate,
            "target_closed_form": tar_exact,
            "target_estimate": tar_estimate,
        },
    )


def random_spec(rng, d, m, modes):
    """A random mixture for the moment checks: Dirichlet-like weights, N(0,1) means."""
    w = rng.uniform(0.2, 1.0, modes)
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return GmmSpec(w, rng.normal((modes, d, m)), rng.uniform(0.3, 1.5, modes))


def run_all(seed=0, bound_trials=10_000, instances=20, samples=200_000, dims=BoundDims(), moment_dims=(6, 4, 3)):
    """Every check with its default sizes; returns {name: TrialReport}."""
    rng = RngStream(seed, 35)
    d, m, modes = moment_dims
    reports = {"theorem1": verify_theorem1(dims, bound_trials, seed)}
    t2, c1, p1 = [], [], []
    for i in range(instances):
        spec = random_spec(rng, d, m, modes)
        dw = rng.normal((d, d)) / math.sqrt(d)
        vs = [rng.normal((m, m)) / math.sqrt(m) for _ in range(modes)]
        t2.append(verify_theorem2(spec, dw, samples, seed + i))
        c1.append(verify_corollary1(spec, dw, vs, samples, seed + i))
        other = random_spec(rng, d, m, modes)
        p1.append(verify_proposition1(spec, other, dw, samples, seed + i))
    for name, group in (("theorem2", t2), ("corollary1", c1), ("proposition1", p1)):
        reports[name] = _combine(name, group, seed)
    return reports


def _combine(name, group, seed):
    return TrialReport(
        name,
        len(group),
        sum(r.violations for r in group),
        max_rel_error=max(r.max_rel_error for r in group),
        seed=seed,
        details={"instances": [r.details for r in group]},
    )
