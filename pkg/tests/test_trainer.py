import numpy as np
import pytest

from cpelab.attention import make_stack
from cpelab.bank import generate_banks
from cpelab.errors import ConfigError, InvalidInputError, NumericFailure
from cpelab.evaluate import zero_resag
from cpelab.losses import AdversarialSet, adversarial_loss, erasing_loss_batch
from cpelab.numkit import RngStream
from cpelab.resag import init_resag
from cpelab.trainer import (
    PRESETS,
    AdamState,
    TrainConfig,
    lr_at,
    optimizer_step,
    train_adversarial_stage,
    train_concept,
)

from oracles import adam_scalar, cosine_restart_oracle

SMALL_BANK = dict(d=8, m=4, pool_size=6, remaining=2, samples=8, seed=1)
SMALL_STACK = dict(layers=2, d1=4, d2=4, heads=2, queries=8, seed=1)


@pytest.fixture(scope="module")
def small():
    bank = generate_banks(SMALL_BANK)[0]
    layers, queries = make_stack(SMALL_STACK, bank.d, bank.m)
    return bank, layers, queries


def small_cfg(**kw):
    base = dict(s1=3, s2=1, n_adv=2, stages=2, t1=10, t2=5, t3=5, anchors=2, lam=1.0)
    return TrainConfig(**{**base, **kw})


def test_lr_schedule_matches_oracle():
    assert lr_at("cosine_restart", 0, 1800, 3e-4) == 3e-4
    assert np.isclose(lr_at("cosine_restart", 900, 1800, 3e-4), 1.5e-4)
    for it in range(1800):
        assert np.isclose(lr_at("cosine_restart", it, 1800, 3e-4, 3), cosine_restart_oracle(it, 1800, 3e-4, 3), rtol=0, atol=1e-18)
    assert lr_at("cosine_restart", 600, 1800, 3e-4, 3) == 3e-4
    assert lr_at("constant", 17, 20, 0.1) == 0.1
    with pytest.raises(InvalidInputError):
        lr_at("cosine_restart", 1800, 1800, 3e-4)


def test_adam_matches_scalar_oracle():
    target = np.array([1.0, -2.0, 0.5])
    x = np.array([0.0, 0.0, 3.0])
    state = AdamState({"x": x})
    for _ in range(100):
        optimizer_step(state, {"x": 2 * (x - target)}, 0.05)
    trace = adam_scalar(lambda v: [2 * (a - b) for a, b in zip(v, target)], [0.0, 0.0, 3.0], 0.05, 100)
    assert np.allclose(x, trace[-1], rtol=1e-12, atol=1e-14)


def test_adam_zero_gradient_is_a_no_op():
    x = np.arange(4.0)
    state = AdamState({"x": x})
    optimizer_step(state, {"x": np.zeros(4)}, 1.0)
    assert np.array_equal(x, np.arange(4.0))
    with pytest.raises(InvalidInputError):
        optimizer_step(state, {}, 1.0)
    with pytest.raises(InvalidInputError):
        optimizer_step(state, {"x": np.zeros(5)}, 1.0)


def test_zero_rate_keeps_initialization(small):
    bank, layers, queries = small
    cfg = small_cfg(stages=1, t1=1, lr_initial=0.0)
    r, _ = train_concept(cfg, bank, layers, queries)
    init = init_resag(bank.target_id, layers, cfg.s1, cfg.s2, RngStream(cfg.seed, 11))
    assert r.digest() == init.digest()


def test_adversarial_stage_leaves_resag_untouched_and_descends(small):
    bank, layers, queries = small
    r, _ = train_concept(small_cfg(stages=1, t1=30), bank, layers, queries)
    before = r.digest()
    adv = AdversarialSet.init(4, bank.d, bank.m, RngStream(0, 0), std=1e-3)
    cfg = small_cfg(t3=200, lr_adv=0.01)
    out = train_adversarial_stage(cfg, bank, layers, r, adv)
    assert r.digest() == before
    assert adversarial_loss(layers, r, bank.e_tar, out) < adversarial_loss(layers, r, bank.e_tar, adv)


def test_erase_stage_freezes_adversarial_set(small, monkeypatch):
    import cpelab.trainer as trainer

    seen = []
    real = trainer.train_adversarial_stage

    def spy(cfg, bank, layers, r, adv, *args, **kw):
        seen.append(adv.residuals.copy())
        out = real(cfg, bank, layers, r, adv, *args, **kw)
        seen.append(out.residuals.copy())
        return out

    monkeypatch.setattr(trainer, "train_adversarial_stage", spy)
    bank, layers, queries = small
    train_concept(small_cfg(stages=3), bank, layers, queries)
    # stage 3 starts from what stage 2's attack produced
    assert np.array_equal(seen[1], seen[2])


def test_training_reduces_erase_loss(small):
    bank, layers, queries = small
    r, reports = train_concept(small_cfg(stages=1, t1=200, lr_initial=1e-2, lam=0.0), bank, layers, queries)
    start = erasing_loss_batch(layers, zero_resag(r), bank.e_tar, bank.e_sur, 0.3)
    assert reports[0].erase_eval < 0.5 * start
    assert len(reports[0].erase_trace) == 200 and reports[0].adv_trace == []


def test_no_adversaries_matches_single_stage_runs(small):
    bank, layers, queries = small
    r, reports = train_concept(small_cfg(n_adv=0, stages=2), bank, layers, queries)
    assert all(rep.adv_trace == [] and set(rep.shifted_trace) == {0.0} for rep in reports)
    assert np.isfinite(reports[-1].erase_eval)


def test_same_seed_same_result(small):
    bank, layers, queries = small
    a, _ = train_concept(small_cfg(), bank, layers, queries)
    b, _ = train_concept(small_cfg(), bank, layers, queries)
    c, _ = train_concept(small_cfg(seed=5), bank, layers, queries)
    assert a.digest() == b.digest() != c.digest()


def test_divergence_raises_numeric_failure(small):
    bank, layers, queries = small
    with pytest.raises(NumericFailure) as info, np.errstate(invalid="ignore"):
        train_concept(small_cfg(stages=1, lr_initial=float("inf")), bank, layers, queries)
    assert info.value.stage == 1 and info.value.iteration >= 1


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"t1": 10, "warmup": 3})
    for bad in (dict(stages=0), dict(t1=0), dict(lr_initial=-1.0), dict(eta=-0.1), dict(schedule="linear"), dict(s1=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_presets():
    assert PRESETS["celebrity"] == dict(s1=16, s2=1, eta=0.3, lam=1e5, n_adv=16, stages=5, t1=1800, t2=450, t3=450)
    assert PRESETS["artistic"]["eta"] == 0.5 and PRESETS["artistic"]["stages"] == 10
    assert PRESETS["explicit"]["s1"] == 64 and PRESETS["explicit"]["n_adv"] == 64
    for p in PRESETS.values():
        TrainConfig.from_dict(p)
