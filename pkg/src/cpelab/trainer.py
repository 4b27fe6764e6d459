"""Staged training: erase with the ResAG, attack with adversarial residuals, repeat.

Stage 1 runs ``t1`` erasing iterations without the adversarial term. Every
later stage first fits the adversarial residuals for ``t3`` iterations with
the ResAG frozen, then runs ``t2`` erasing iterations with the residuals
frozen. The adversarial set is initialized once and carried across stages.
"""

from dataclasses import asdict, dataclass, field, fields
import math
import os
import time

import numpy as np

from .attention import compute_bound_coefficients
from .errors import ConfigError, InvalidInputError, NumericFailure
from .grad import Tape, backward
from .losses import (
    AdversarialSet,
    LossWeights,
    adversarial_loss_tape,
    anchoring_loss_tape,
    augment_anchor_pair,
    erasing_loss_batch,
    erasing_loss_tape,
    rank_anchors,
)
from .numkit import RngStream, dump_json, sample_gmm
from .resag import init_resag, save_checkpoint, tape_nodes

# stream ids inside one training run
_S_INIT, _S_BATCH, _S_ANCHOR, _S_ADV = 11, 12, 13, 14


@dataclass
class TrainConfig:
    eta: float = 0.3
    lam: float = 1e5
    delta: float = 1e-3
    mixup_alpha: float = 1.0
    mixup_beta: float = 1.0
    s1: int = 16
    s2: int = 1
    n_adv: int = 16
    t1: int = 1800
    t2: int = 450
    t3: int = 450
    stages: int = 5
    lr_initial: float = 3e-4
    lr_later: float = 3e-5
    lr_adv: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine_restart"
    seed: int = 0
    batch_size: int = 1
    anchors: int = 5
    adv_init_std: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if min(self.t1, self.t2, self.t3) < 1:
            raise ConfigError("t1, t2 and t3 must be >= 1")
        # a zero rate is allowed so that the frozen/no-op paths can be exercised
        if min(self.lr_initial, self.lr_later, self.lr_adv) < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.eta < 0 or self.lam < 0 or self.delta < 0:
            raise ConfigError("eta, lambda and delta must be nonnegative")
        if self.mixup_alpha <= 0 or self.mixup_beta <= 0:
            raise ConfigError("mixup alpha and beta must be positive")
        if self.s1 < 1 or self.s2 < 1 or self.batch_size < 1 or self.anchors < 1 or self.n_adv < 0:
            raise ConfigError("ranks, batch size and anchor count must be >= 1; n_adv >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; choose from {sorted(SCHEDULES)}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# Hyperparameters of the three regimes (celebrities, artistic styles, explicit content).
CELEBRITY = dict(s1=16, s2=1, eta=0.3, lam=1e5, n_adv=16, stages=5, t1=1800, t2=450, t3=450)
ARTISTIC = dict(s1=16, s2=1, eta=0.5, lam=1e4, n_adv=16, stages=10, t1=1800, t2=450, t3=450)
EXPLICIT = dict(s1=64, s2=4, eta=3.0, lam=1e4, n_adv=64, stages=20, t1=2400, t2=1200, t3=1200)
PRESETS = {"celebrity": CELEBRITY, "artistic": ARTISTIC, "explicit": EXPLICIT}


@dataclass
class StageReport:
    stage: int
    erase_trace: list = field(default_factory=list)
    anchor_trace: list = field(default_factory=list)
    shifted_trace: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    adv_trace: list = field(default_factory=list)
    adv_lr_trace: list = field(default_factory=list)
    erase_eval: float = float("nan")
    wall_time: float = 0.0


# -- optimizer and schedule ---------------------------------------------------


class AdamState:
    """Moment estimates for a dict of parameter arrays, updated in place."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def optimizer_step(state, grads, lr):
    """One bias-corrected Adam update of ``state.params``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in state.params.items():
        if name not in grads:
            raise InvalidInputError(f"no gradient for {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        # the tape stores vectors as 1 x n rows
        if g.size != p.size or (g.shape != p.shape and p.ndim != 1):
            raise InvalidInputError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        g = g.reshape(p.shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def _cosine_restart(it, total, base_lr, cycles=1):
    period = math.ceil(total / cycles)
    t = it % period
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / period))


def _constant(it, total, base_lr, cycles=1):
    return base_lr


SCHEDULES = {"cosine_restart": _cosine_restart, "constant": _constant}


def lr_at(schedule, it, total, base_lr, cycles=1):
    """Learning rate at iteration ``it`` of ``total``.

    ``cosine_restart`` anneals from ``base_lr`` to 0 over each of ``cycles``
    equal periods and jumps back at every restart.
    """
    if not 0 <= it < total:
        raise InvalidInputError(f"iteration {it} outside [0, {total})")
    return SCHEDULES[schedule](it, total, base_lr, cycles)


# -- training -------------------------------------------------------------------


class _Sampler:
    """Draws minibatches of target/surrogate pairs and augmented anchors."""

    def __init__(self, cfg, bank, anchor_specs):
        self.cfg = cfg
        self.bank = bank
        self.anchors = anchor_specs
        self.batch_rng = RngStream(cfg.seed, _S_BATCH)
        self.anchor_rng = RngStream(cfg.seed, _S_ANCHOR)

    def pairs(self):
        idx = self.batch_rng.integers(0, len(self.bank.e_tar), size=self.cfg.batch_size)
        return [self.bank.e_tar[i] for i in idx], [self.bank.e_sur[i] for i in idx]

    def targets(self):
        idx = self.batch_rng.integers(0, len(self.bank.e_tar), size=self.cfg.batch_size)
        return [self.bank.e_tar[i] for i in idx]

    def anchor_batch(self):
        out = []
        rng = self.anchor_rng
        k = len(self.anchors)
        for _ in range(self.cfg.batch_size):
            i = int(rng.integers(0, k))
            j = int(rng.integers(0, k - 1)) if k > 1 else 0
            if k > 1 and j >= i:
                j += 1
            e1 = sample_gmm(self.anchors[i], rng)
            e2 = sample_gmm(self.anchors[j], rng)
            out.append(augment_anchor_pair(e1, e2, self.cfg.delta, self.cfg.mixup_alpha, self.cfg.mixup_beta, rng))
        return out


def _check_finite(value, stage, it, what):
    if not math.isfinite(value):
        raise NumericFailure(f"non-finite {what} loss", stage=stage, iteration=it)


def erase_step(cfg, layers, r_params, nodes_from, tape, pairs, anchors, weights, adv, stage):
    """Record one erasing objective on ``tape``; returns (total, erase, shifted, anchor) nodes."""
    e_tars, e_surs = pairs
    era = tape.average([erasing_loss_tape(tape, nodes_from, layers, t, s, weights.eta) for t, s in zip(e_tars, e_surs)])
    total = era
    shifted = None
    if stage > 1 and adv is not None and adv.n > 0:
        per_adv = []
        for delta in adv.residuals:
            per_adv.append(
                tape.average(
                    [erasing_loss_tape(tape, nodes_from, layers, t + delta, s, weights.eta) for t, s in zip(e_tars, e_surs)]
                )
            )
        shifted = tape.average(per_adv)
        total = total + shifted
    anc = None
    if weights.lam != 0.0:
        anc = tape.average([anchoring_loss_tape(tape, nodes_from, layers, e, weights.coefficients) for e in anchors])
        total = total + tape.scale(anc, weights.lam)
    return total, era, shifted, anc


def train_adversarial_stage(cfg, bank, layers, r, adv, stage=2, sampler=None, report=None):
    """``t3`` Adam steps on the adversarial residuals with the ResAG held fixed."""
    sampler = sampler or _Sampler(cfg, bank, [])
    adv = adv.copy()
    params = {f"adv.{n}": adv.residuals[n] for n in range(adv.n)}
    opt = AdamState(params, cfg.beta1, cfg.beta2, cfg.eps)
    for it in range(cfg.t3):
        tape = Tape()
        frozen = tape_nodes(tape, r, trainable=False)
        adv_nodes = [tape.param(name, value) for name, value in params.items()]
        loss = adversarial_loss_tape(tape, frozen, layers, sampler.targets(), adv_nodes)
        value = loss.item()
        _check_finite(value, stage, it, "adversarial")
        grads = backward(tape, loss)
        lr = lr_at(cfg.schedule, it, cfg.t3, cfg.lr_adv)
        optimizer_step(opt, grads, lr)
        if report is not None:
            report.adv_trace.append(value)
            report.adv_lr_trace.append(lr)
    return adv


def bound_coefficients_for(bank, layers, queries, anchor_specs):
    """Coefficients over the training embeddings: bank pairs plus anchor means."""
    dataset = list(bank.e_tar) + list(bank.e_sur)
    for spec in anchor_specs:
        dataset.extend(spec.means)
    return compute_bound_coefficients(layers, dataset, queries)


def train_concept(cfg, bank, layers, queries=None, coefficients=None, checkpoint_dir=None, stack_id=None, log=None):
    """Train one concept's ResAG; returns (ResAG, [StageReport per stage])."""
    cfg.validate()
    if not layers:
        raise InvalidInputError("layer stack is empty")
    if layers[0].d != bank.d or layers[0].m != bank.m:
        raise InvalidInputError("bank and layer stack disagree on (d, m)")
    order, _ = rank_anchors(bank.pool, bank.target)
    if cfg.anchors > len(order):
        raise ConfigError(f"anchors={cfg.anchors} exceeds the pool size {len(order)}")
    anchor_specs = [bank.pool[i] for i in order[: cfg.anchors]]
    if coefficients is None:
        if queries is None:
            raise InvalidInputError("need queries or precomputed coefficients")
        coefficients = bound_coefficients_for(bank, layers, queries, anchor_specs)
    weights = LossWeights(cfg.eta, cfg.lam, coefficients)

    r = init_resag(bank.target_id, layers, cfg.s1, cfg.s2, RngStream(cfg.seed, _S_INIT))
    sampler = _Sampler(cfg, bank, anchor_specs)
    use_adv = cfg.stages > 1 and cfg.n_adv > 0
    adv = AdversarialSet.init(cfg.n_adv, bank.d, bank.m, RngStream(cfg.seed, _S_ADV), cfg.adv_init_std) if use_adv else None

    reports = []
    for stage in range(1, cfg.stages + 1):
        t0 = time.perf_counter()
        report = StageReport(stage)
        if stage > 1 and use_adv:
            adv = train_adversarial_stage(cfg, bank, layers, r, adv, stage, sampler, report)
        iters = cfg.t1 if stage == 1 else cfg.t2
        base_lr = cfg.lr_initial if stage == 1 else cfg.lr_later
        params = r.params()
        opt = AdamState(params, cfg.beta1, cfg.beta2, cfg.eps)
        for it in range(iters):
            tape = Tape()
            nodes = tape_nodes(tape, r, trainable=True)
            total, era, shifted, anc = erase_step(
                cfg, layers, params, nodes, tape, sampler.pairs(), sampler.anchor_batch(), weights, adv, stage
            )
            value = total.item()
            _check_finite(value, stage, it, "erasing")
            grads = backward(tape, total)
            lr = lr_at(cfg.schedule, it, iters, base_lr)
            optimizer_step(opt, grads, lr)
            report.erase_trace.append(era.item())
            report.anchor_trace.append(anc.item() if anc is not None else 0.0)
            report.shifted_trace.append(shifted.item() if shifted is not None else 0.0)
            report.lr_trace.append(lr)
        report.erase_eval = erasing_loss_batch(layers, r, bank.e_tar, bank.e_sur, cfg.eta)
        report.wall_time = time.perf_counter() - t0
        reports.append(report)
        if log is not None:
            log(f"stage {stage}/{cfg.stages}: erase_eval={report.erase_eval:.6g} ({report.wall_time:.1f}s)")
        if checkpoint_dir is not None:
            save_checkpoint(r, os.path.join(checkpoint_dir, f"stage{stage}"), stack_id)
    return r, reports


def write_reports(reports, directory, extra=None):
    """CSV traces plus a JSON summary; wall times go to a separate timing file."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "trace.csv"), "w") as fh:
        fh.write("stage,phase,iteration,erase,shifted,anchor,adversarial,lr\n")
        for rep in reports:
            for i, v in enumerate(rep.adv_trace):
                fh.write(f"{rep.stage},attack,{i},,,,{v!r},{rep.adv_lr_trace[i]!r}\n")
            for i, v in enumerate(rep.erase_trace):
                fh.write(
                    f"{rep.stage},erase,{i},{v!r},{rep.shifted_trace[i]!r},{rep.anchor_trace[i]!r},,{rep.lr_trace[i]!r}\n"
                )
    summary = {
        "stages": [
            {
                "stage": rep.stage,
                "erase_iterations": len(rep.erase_trace),
                "attack_iterations": len(rep.adv_trace),
                "erase_eval": rep.erase_eval,
                "final_erase": rep.erase_trace[-1] if rep.erase_trace else None,
                "final_attack": rep.adv_trace[-1] if rep.adv_trace else None,
            }
            for rep in reports
        ]
    }
    summary.update(extra or {})
    dump_json(summary, os.path.join(directory, "summary.json"))
    dump_json({"wall_time": [rep.wall_time for rep in reports]}, os.path.join(directory, "timing.json"))
    return summary
