"""Post-training measurements: residual shifts, selectivity and fresh-attack loss."""

import numpy as np

from .attention import projection_refs
from .bank import sample_pairs
from .losses import AdversarialSet, adversarial_loss, erasing_loss_batch, select_anchors
from .numkit import RngStream, frobenius_norm, sample_gmm
from .resag import resag_forward
from .trainer import TrainConfig, train_adversarial_stage

_S_EVAL, _S_ATTACK = 41, 21


def residual_norm(r, layers, e):
    """Frobenius norm of the residuals of every key and value projection, stacked."""
    return float(np.sqrt(sum(frobenius_norm(resag_forward(r, ref, e)) ** 2 for ref in projection_refs(layers))))


def zero_resag(r):
    """Copy of ``r`` with every U4 zeroed, so every residual vanishes."""
    z = r.copy()
    for dl in z.deltas.values():
        dl.u4[...] = 0.0
    return z


def fresh_attack_loss(r, bank, layers, t3=150, n_adv=16, lr_adv=0.01, init_std=1e-3, seed=0):
    """Final adversarial objective over the bank's target samples after a fresh ``t3``-step attack."""
    cfg = TrainConfig(t3=t3, n_adv=n_adv, lr_adv=lr_adv, adv_init_std=init_std, seed=seed)
    adv = AdversarialSet.init(n_adv, bank.d, bank.m, RngStream(seed, _S_ATTACK), init_std)
    adv = train_adversarial_stage(cfg, bank, layers, r, adv)
    return adversarial_loss(layers, r, bank.e_tar, adv)


def selectivity_report(r, bank, layers, samples=200, eta=0.3, anchors=5, seed=0):
    """Residual shifts on fresh target, remaining and anchor samples.

    The remaining and anchor means use ``samples // count`` draws per concept.
    ``selectivity_ratio`` is "not-applicable" when the target residual is 0.
    """
    rng = RngStream(seed, _S_EVAL)
    tar_norm = float(np.mean([residual_norm(r, layers, sample_gmm(bank.target, rng)) for _ in range(samples)]))
    rem = [residual_norm(r, layers, sample_gmm(s, rng)) for s in bank.remaining for _ in range(max(1, samples // len(bank.remaining)))]
    anc_specs = select_anchors(bank.pool, bank.target, min(anchors, len(bank.pool)))
    anc = [residual_norm(r, layers, sample_gmm(s, rng)) for s in anc_specs for _ in range(max(1, samples // len(anc_specs)))]
    e_tar, e_sur, _ = sample_pairs(bank.target, bank.surrogate, rng, samples)
    base = erasing_loss_batch(layers, zero_resag(r), e_tar, e_sur, eta)
    trained = erasing_loss_batch(layers, r, e_tar, e_sur, eta)
    rem_norm = float(np.mean(rem))
    return {
        "concept": r.concept_id,
        "target_residual": tar_norm,
        "erase_loss": trained,
        "erase_loss_zero_resag": base,
        "erase_reduction_pct": 100.0 * (1.0 - trained / base) if base > 0 else 0.0,
        "remaining_residual": rem_norm,
        "selectivity_ratio": rem_norm / tar_norm if tar_norm > 0 else "not-applicable",
        "anchor_residual": float(np.mean(anc)),
    }
