"""Erasing, attention-anchoring and adversarial objectives, plus anchor handling.

Each loss exists twice: a plain numpy evaluation returning a float, and a
``*_tape`` builder that records the same computation on a ``grad.Tape`` for
training. Batch conventions: average over samples, sum over every key and
value projection of every layer.
"""

from dataclasses import dataclass

import numpy as np

from .attention import BoundCoefficients, projection_refs
from .errors import InvalidInputError, InvalidStateError
from .numkit import frobenius_norm
from .resag import gate_forward, resag_forward, tape_gate, tape_residual
from .bank import flat_cosine


@dataclass(frozen=True)
class LossWeights:
    eta: float
    lam: float
    coefficients: BoundCoefficients = None

    def __post_init__(self):
        if self.eta < 0 or self.lam < 0:
            raise InvalidInputError("eta and lambda must be nonnegative")


@dataclass
class AdversarialSet:
    """N learnable residual embeddings, each d x m, added to target embeddings."""

    residuals: np.ndarray  # (N, d, m)

    def __post_init__(self):
        self.residuals = np.asarray(self.residuals, dtype=np.float64)
        if self.residuals.ndim != 3:
            raise InvalidInputError("adversarial residuals must have shape (N, d, m)")

    @property
    def n(self):
        return len(self.residuals)

    @classmethod
    def init(cls, n, d, m, rng, std=1e-3):
        return cls(std * rng.normal((n, d, m)))

    def copy(self):
        return AdversarialSet(self.residuals.copy())


def _weights_of(layers, proj):
    return layers[proj.layer].projection(proj.kind)


def _check_pair(w, e_tar, e_sur):
    if e_tar.shape != e_sur.shape or w.shape[1] != e_tar.shape[0]:
        raise InvalidInputError(f"shape mismatch: W {w.shape}, E_tar {e_tar.shape}, E_sur {e_sur.shape}")


def erase_target(w, e_tar, e_sur, eta):
    """The shifted surrogate output the augmented target projection is pulled toward."""
    return w @ e_sur - eta * (w @ (e_tar - e_sur))


def erasing_loss(w, r, proj, e_tar, e_sur, eta):
    """Squared Frobenius gap for one projection and one pair."""
    e_tar = np.asarray(e_tar, dtype=np.float64)
    e_sur = np.asarray(e_sur, dtype=np.float64)
    _check_pair(w, e_tar, e_sur)
    gap = w @ e_tar + resag_forward(r, proj, e_tar) - erase_target(w, e_tar, e_sur, eta)
    return float(np.sum(gap * gap))


def erasing_loss_batch(layers, r, e_tars, e_surs, eta):
    """Mean over pairs of the sum over all key/value projections."""
    refs = projection_refs(layers)
    total = 0.0
    for e_tar, e_sur in zip(e_tars, e_surs):
        a, g = gate_forward(r.gate, e_tar)
        ea = e_tar @ a
        for ref in refs:
            w = _weights_of(layers, ref)
            dl = r.delta(ref)
            res = (dl.u4.T @ (dl.u3 @ ea)) * g[None, :]
            gap = w @ e_tar + res - erase_target(w, e_tar, e_sur, eta)
            total += float(np.sum(gap * gap))
    return total / len(e_tars)


def attention_anchoring_loss(r, e_anc, weights, layers=None):
    """Coefficient-weighted residual norms at one anchor embedding.

    Sums ``c1[l] * ||R_key,l||_F + c2[l] * ||R_value,l||_F`` over layers.
    """
    coef = weights.coefficients if isinstance(weights, LossWeights) else weights
    if coef is None:
        raise InvalidStateError("bound coefficients have not been computed for this stack")
    refs = list(r.deltas) if layers is None else projection_refs(layers)
    total = 0.0
    for ref in refs:
        if ref.layer >= len(coef.c1):
            raise InvalidStateError(f"no coefficients for layer {ref.layer}")
        total += coef.for_projection(ref) * frobenius_norm(resag_forward(r, ref, e_anc))
    return total


def attention_anchoring_loss_batch(r, e_ancs, weights, layers=None):
    return sum(attention_anchoring_loss(r, e, weights, layers) for e in e_ancs) / len(e_ancs)


def adversarial_loss(layers, r, e_tars, adv):
    """(1/N) sum_n mean_t sum_proj ||W(E_t + D_n) + R(E_t + D_n) - W E_t||_F."""
    if adv.n == 0:
        raise InvalidInputError("adversarial set is empty")
    refs = projection_refs(layers)
    total = 0.0
    for delta in adv.residuals:
        per_n = 0.0
        for e_tar in e_tars:
            e_adv = e_tar + delta
            for ref in refs:
                w = _weights_of(layers, ref)
                gap = w @ e_adv + resag_forward(r, ref, e_adv) - w @ e_tar
                per_n += frobenius_norm(gap)
        total += per_n / len(e_tars)
    return total / adv.n


def total_loss(layers, r, e_tars, e_surs, e_ancs, weights, adv=None, stage=1):
    """Erasing term, adversarially shifted erasing terms (stage > 1) and weighted anchoring."""
    if stage < 1:
        raise InvalidInputError("stage counts from 1")
    loss = erasing_loss_batch(layers, r, e_tars, e_surs, weights.eta)
    if stage > 1 and adv is not None and adv.n > 0:
        shifted = sum(
            erasing_loss_batch(layers, r, [e + delta for e in e_tars], e_surs, weights.eta) for delta in adv.residuals
        )
        loss += shifted / adv.n
    if weights.lam != 0.0:
        loss += weights.lam * attention_anchoring_loss_batch(r, e_ancs, weights, layers)
    return loss


# -- tape builders --------------------------------------------------------------


def erasing_loss_tape(tape, nodes, layers, e_tar, e_sur, eta):
    """One pair's erasing term summed over projections; ``e_tar`` may be a node."""
    e_node = tape._node(e_tar)
    ea, _, g = tape_gate(tape, nodes, e_node)
    terms = []
    for ref in projection_refs(layers):
        w = _weights_of(layers, ref)
        if isinstance(e_tar, np.ndarray):
            base = tape.const(w @ e_tar - erase_target(w, e_tar, e_sur, eta))
        else:
            # (1 + eta) W E_tar - (1 + eta) W E_sur with E_tar on the tape
            base = tape.scale(tape.matmul(w, e_node), 1.0 + eta) - tape.const((1.0 + eta) * (w @ e_sur))
        terms.append(tape.squared_frobenius(base + tape_residual(tape, nodes, ref, ea, g)))
    return tape.sum(terms)


def anchoring_loss_tape(tape, nodes, layers, e_anc, coefficients):
    if coefficients is None:
        raise InvalidStateError("bound coefficients have not been computed for this stack")
    e_node = tape.const(e_anc)
    ea, _, g = tape_gate(tape, nodes, e_node)
    terms = [
        tape.scale(tape.frobenius_norm(tape_residual(tape, nodes, ref, ea, g)), coefficients.for_projection(ref))
        for ref in projection_refs(layers)
    ]
    return tape.sum(terms)


def total_loss_tape(tape, nodes, layers, e_tars, e_surs, e_ancs, weights, adv=None, stage=1):
    terms = [erasing_loss_tape(tape, nodes, layers, t, s, weights.eta) for t, s in zip(e_tars, e_surs)]
    loss = tape.average(terms)
    if stage > 1 and adv is not None and adv.n > 0:
        shifted = []
        for delta in adv.residuals:
            per = [erasing_loss_tape(tape, nodes, layers, t + delta, s, weights.eta) for t, s in zip(e_tars, e_surs)]
            shifted.append(tape.average(per))
        loss = loss + tape.average(shifted)
    if weights.lam != 0.0:
        anc = tape.average([anchoring_loss_tape(tape, nodes, layers, e, weights.coefficients) for e in e_ancs])
        loss = loss + tape.scale(anc, weights.lam)
    return loss


def adversarial_loss_tape(tape, nodes, layers, e_tars, adv_nodes):
    """Adversarial objective with the residual embeddings as tape nodes."""
    refs = projection_refs(layers)
    outer = []
    for delta in adv_nodes:
        inner = []
        for e_tar in e_tars:
            e_adv = tape.const(e_tar) + delta
            ea, _, g = tape_gate(tape, nodes, e_adv)
            terms = []
            for ref in refs:
                w = _weights_of(layers, ref)
                # W(E + D) - W E = W D
                gap = tape.matmul(w, delta) + tape_residual(tape, nodes, ref, ea, g)
                terms.append(tape.frobenius_norm(gap))
            inner.append(tape.sum(terms))
        outer.append(tape.average(inner))
    return tape.average(outer)


# -- anchors ----------------------------------------------------------------------


def rank_anchors(pool, target):
    """Pool indices sorted by decreasing flattened-mean cosine to the target (ties: lower index)."""
    if not pool:
        raise InvalidInputError("anchor pool is empty")
    tmean = target.mean()
    sims = [flat_cosine(spec.mean(), tmean) for spec in pool]
    return sorted(range(len(pool)), key=lambda i: (-sims[i], i)), sims


def select_anchors(pool, target, k):
    if k > len(pool):
        raise InvalidInputError(f"cannot select {k} anchors from a pool of {len(pool)}")
    order, _ = rank_anchors(pool, target)
    return [pool[i] for i in order[:k]]


def augment_anchor_pair(e1, e2, delta, alpha, beta, rng, zeta=None):
    """Noise both anchors by ``delta * N(0, I)``, then mix with ``zeta ~ Beta(alpha, beta)``.

    ``zeta`` may be fixed by the caller; the noise is drawn either way.
    """
    if delta < 0 or alpha <= 0 or beta <= 0:
        raise InvalidInputError("need delta >= 0 and alpha, beta > 0")
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1 = e1 + delta * rng.normal(e1.shape)
    n2 = e2 + delta * rng.normal(e2.shape)
    z = rng.beta(alpha, beta) if zeta is None else float(zeta)
    return z * n1 + (1.0 - z) * n2
