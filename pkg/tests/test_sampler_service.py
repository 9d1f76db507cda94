# tests/test_sampler_service.py
import itertools
import logging

import numpy as np
import pytest

from services.sampler_service import SamplerService
from utils.errors import PreconditionError

PROBS = np.array([0.2, 0.5, 0.7, 0.9])


def test_samples_are_distinct_with_their_log_q():
    out = SamplerService.sample_without_replacement(PROBS, 8, seed=5)
    assert out.configs.shape == (8, 4)
    assert len({tuple(r) for r in out.configs}) == 8
    np.testing.assert_allclose(out.log_q, SamplerService.log_prob(PROBS, out.configs))
    assert out.filled == 0


def test_sample_count_bounds():
    with pytest.raises(PreconditionError):
        SamplerService.sample_without_replacement(PROBS[:2], 5, seed=0)
    with pytest.raises(PreconditionError):
        SamplerService.sample_without_replacement(PROBS, 0, seed=0)
    # every configuration of two bits
    out = SamplerService.sample_without_replacement(PROBS[:2], 4, seed=0)
    assert {tuple(r) for r in out.configs} == set(itertools.product((0, 1), repeat=2))


def test_saturated_probabilities_are_filled_by_rank(caplog):
    with caplog.at_level(logging.WARNING):
        out = SamplerService.sample_without_replacement([0.0, 1.0, 0.0], 4, seed=1)
    assert out.filled == 3
    assert len({tuple(r) for r in out.configs}) == 4
    assert tuple(out.configs[0]) == (0, 1, 0)
    assert np.all(np.isfinite(out.log_q))
    assert "filling" in caplog.text


def test_same_seed_same_draws():
    a = SamplerService.sample_without_replacement(PROBS, 6, seed=42)
    b = SamplerService.sample_without_replacement(PROBS, 6, seed=42)
    np.testing.assert_array_equal(a.configs, b.configs)


def test_invalid_probabilities():
    for bad in ([1.2, 0.5], [-0.1], [np.nan]):
        with pytest.raises(PreconditionError):
            SamplerService.log_prob(bad, [[0] * len(bad)])


def test_enumeration_is_a_distribution():
    configs, q = SamplerService.enumerate_all(PROBS)
    assert configs.shape == (16, 4)
    assert q.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(configs[1], [0, 0, 0, 1])
    np.testing.assert_allclose(np.log(q), SamplerService.log_prob(PROBS, configs))
    with pytest.raises(PreconditionError):
        SamplerService.enumerate_all(np.full(21, 0.5))


@pytest.mark.parametrize("seed", range(5))
def test_most_probable_configuration_rounds_each_bit(seed):
    probs = np.random.default_rng(seed).uniform(0.05, 0.95, size=6)
    configs, q = SamplerService.enumerate_all(probs)
    np.testing.assert_array_equal(configs[np.argmax(q)], SamplerService.mode(probs))
    np.testing.assert_array_equal(SamplerService.mode(probs), (probs > 0.5).astype(int))


def test_top_configurations_in_decreasing_probability():
    probs = np.array([0.3, 0.8, 0.55, 0.95, 0.1])
    top = SamplerService.top_configurations(probs, 32)
    assert len({tuple(r) for r in top}) == 32
    q_top = np.exp(SamplerService.log_prob(probs, top))
    _, q_all = SamplerService.enumerate_all(probs)
    np.testing.assert_allclose(q_top, np.sort(q_all)[::-1], rtol=1e-12)
    np.testing.assert_array_equal(top[0], SamplerService.mode(probs))
    assert len(SamplerService.top_configurations(probs, 3)) == 3


def test_first_draw_follows_the_product_distribution():
    rng = np.random.default_rng(2024)
    draws = 100_000
    counts = np.zeros(16)
    weights = 1 << np.arange(3, -1, -1)
    for _ in range(draws):
        config = SamplerService.sample_without_replacement(PROBS, 1, rng).configs[0]
        counts[config @ weights] += 1
    _, q = SamplerService.enumerate_all(PROBS)
    tv = 0.5 * np.abs(counts / draws - q).sum()
    assert tv < 0.02


def test_no_duplicates_over_many_trials():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        configs = SamplerService.sample_without_replacement(PROBS, 6, rng).configs
        assert len({tuple(r) for r in configs}) == 6
