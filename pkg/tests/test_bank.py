import itertools

import numpy as np
import pytest

from cpelab.bank import build_concepts, flat_cosine, generate_banks, load_bank, sample_pairs, save_bank, DEFAULT_BANK
from cpelab.errors import GenerationError, InvalidInputError
from cpelab.numkit import GmmSpec, RngStream

SMALL = dict(d=8, m=4, pool_size=6, remaining=3, samples=10, seed=4)


def test_generation_is_deterministic():
    a, b = generate_banks(SMALL)[0], generate_banks(SMALL)[0]
    assert np.array_equal(a.e_tar, b.e_tar) and np.array_equal(a.e_sur, b.e_sur)
    assert all(np.array_equal(x.means, y.means) for x, y in zip(a.pool, b.pool))
    c = generate_banks({**SMALL, "seed": 5})[0]
    assert not np.array_equal(a.e_tar, c.e_tar)


def test_pairwise_separation_by_brute_force():
    cfg = {**DEFAULT_BANK, **SMALL}
    maker, vectors = build_concepts(cfg)
    means = {k: maker.spec(v).mean().ravel() for k, v in vectors.items()}
    for a, b in itertools.combinations(means, 2):
        x, y = means[a], means[b]
        assert x @ y / np.sqrt((x @ x) * (y @ y)) < 1 - cfg["min_separation"], (a, b)


def test_infeasible_separation_raises():
    cfg = dict(d=12, m=4, templates=1, min_separation=0.99, pool_size=100, remaining=0, max_retries=50)
    with pytest.raises(GenerationError):
        generate_banks(cfg)


def test_paired_draws_differ_only_through_the_concept():
    bank = generate_banks(SMALL)[0]
    rng = RngStream(0, 0)
    e_tar, e_sur, modes = sample_pairs(bank.target, bank.surrogate, rng, 50)
    diff = e_tar - e_sur
    expected = bank.target.means[modes] - bank.surrogate.means[modes]
    assert np.allclose(diff, expected)
    with pytest.raises(InvalidInputError):
        other = GmmSpec(np.array([0.2, 0.8]), bank.target.means, bank.target.sigmas)
        sample_pairs(bank.target, other, rng, 5)


def test_targets_share_everything_but_the_target():
    banks = generate_banks({**SMALL, "targets": 2})
    assert [b.target_id for b in banks] == ["target0", "target1"]
    assert np.array_equal(banks[0].surrogate.means, banks[1].surrogate.means)
    assert not np.array_equal(banks[0].target.means, banks[1].target.means)


def test_round_trip(tmp_path):
    bank = generate_banks(SMALL)[0]
    back = load_bank(save_bank(bank, tmp_path))
    assert back.pool_ids == bank.pool_ids and back.remaining_ids == bank.remaining_ids
    assert np.array_equal(back.e_tar, bank.e_tar) and np.array_equal(back.e_sur, bank.e_sur)
    for x, y in zip(back.remaining, bank.remaining):
        assert np.array_equal(x.means, y.means) and np.array_equal(x.sigmas, y.sigmas)


def test_flat_cosine():
    assert flat_cosine(np.zeros(3), np.ones(3)) == 0.0
    assert np.isclose(flat_cosine(np.ones((2, 2)), 2 * np.ones((2, 2))), 1.0)
    with pytest.raises(InvalidInputError):
        generate_banks({**SMALL, "templates": 9})
