from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from panpriv.dp import (
    NoiseParams,
    RRParams,
    debias_count,
    debias_variance,
    discrete_gaussian_pmf,
    expected_error_bound,
    rr_bit,
    sample_discrete_gaussian,
    sample_discrete_gaussian_array,
    select_eps0_for_aggregator,
)
from panpriv.errors import ParameterError

N = 100_000


def test_rr_params_probabilities():
    rr = RRParams(math.log(3))
    assert rr.flip_prob == pytest.approx(0.25)
    assert rr.keep_prob == pytest.approx(0.5)
    assert rr.truth_prob == pytest.approx(math.exp(rr.eps0) / (1 + math.exp(rr.eps0)))
    assert 0 < rr.flip_prob < 0.5


@pytest.mark.parametrize("eps0", [0.0, -1.0])
def test_rr_rejects_nonpositive(eps0):
    with pytest.raises(ParameterError):
        RRParams(eps0)


def test_rr_clamps_huge_eps():
    for eps0 in (701.0, math.inf):
        rr = RRParams(eps0)
        assert (rr.keep_prob, rr.flip_prob) == (1.0, 0.0)


def test_rr_bit_large_eps_is_identity():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, size=10_000)
    assert np.array_equal(rr_bit(bits, RRParams(50), rng), bits)


def test_rr_bit_tiny_eps_is_uniform():
    rng = np.random.default_rng(1)
    out = rr_bit(np.zeros(N, dtype=int), RRParams(1e-9), rng)
    assert abs(out.mean() - 0.5) <= 0.01


@pytest.mark.parametrize("b", [0, 1])
def test_rr_bit_ln3_marginal(b):
    rng = np.random.default_rng(2 + b)
    out = rr_bit(np.full(N, b), RRParams(math.log(3)), rng)
    same = int((out == b).sum())
    assert stats.chisquare([same, N - same], [0.75 * N, 0.25 * N]).pvalue > 0.001
    p = 0.75
    assert abs(same / N - p) <= 4 * math.sqrt(p * (1 - p) / N)


def test_rr_bit_scalar_and_validation():
    rng = np.random.default_rng(0)
    assert rr_bit(1, RRParams(100), rng) == 1
    with pytest.raises(ParameterError):
        rr_bit(2, RRParams(1), rng)


def test_debias_examples():
    rr = RRParams(math.log(3))
    assert debias_count(40, 100, rr) == pytest.approx(30.0)
    assert debias_count(100 * rr.flip_prob, 100, rr) == pytest.approx(0.0)
    assert debias_count(0, 0, rr) == 0


def test_debias_unbiased_and_variance():
    rng = np.random.default_rng(4)
    rr = RRParams(1.0)
    n, S, rounds = 500, 200, 10_000
    truth = np.zeros(n, dtype=int)
    truth[:S] = 1
    keep = rng.random((rounds, n)) < rr.keep_prob
    noise = rng.integers(0, 2, size=(rounds, n))
    sums = np.where(keep, truth, noise).sum(axis=1)
    est = np.array([debias_count(s, n, rr) for s in sums])
    se = est.std(ddof=1) / math.sqrt(rounds)
    assert abs(est.mean() - S) <= 3 * se
    # each reported bit is Bernoulli(q) or Bernoulli(1-q): variance q(1-q) either way
    q = rr.flip_prob
    exact = n * q * (1 - q) / (1 - 2 * q) ** 2
    assert debias_variance(n, rr) == pytest.approx(exact)
    assert est.var(ddof=1) == pytest.approx(exact, rel=0.05)


def test_expected_error_bound():
    rr = RRParams(1.0)
    e = math.e
    assert expected_error_bound(10_000, rr) == pytest.approx(100 * math.sqrt(1 + e / (1 + e) ** 2))
    assert expected_error_bound(0, rr) == 0
    assert expected_error_bound(40_000, rr) == pytest.approx(2 * expected_error_bound(10_000, rr))
    assert expected_error_bound(100, rr, C=3) == pytest.approx(3 * expected_error_bound(100, rr))


def test_select_eps0():
    assert select_eps0_for_aggregator(1.0, 1e-6, 1).eps0 == 1.0
    golden = math.log(2 * 10_000 / (64 * math.log(4e6)) - 1)
    got = select_eps0_for_aggregator(1.0, 1e-6, 10_000).eps0
    assert got == pytest.approx(golden) and got > 1
    prev = 0.0
    for n in [1, 2, 10, 100, 1000, 10_000, 100_000, 10**6]:
        cur = select_eps0_for_aggregator(0.5, 1e-5, n).eps0
        assert cur >= prev
        prev = cur


@pytest.mark.parametrize("eps,delta", [(0, 1e-6), (1, 0), (1, 1), (-1, 0.5)])
def test_select_eps0_rejects(eps, delta):
    with pytest.raises(ParameterError):
        select_eps0_for_aggregator(eps, delta, 10)


def test_discrete_gaussian_zero_variance():
    rng = np.random.default_rng(0)
    assert all(sample_discrete_gaussian(0, rng) == 0 for _ in range(100))
    assert not sample_discrete_gaussian_array(0, 50, rng).any()
    with pytest.raises(ParameterError):
        sample_discrete_gaussian(-1, rng)


def test_discrete_gaussian_pmf_matches_oracle():
    rng = np.random.default_rng(5)
    draws = sample_discrete_gaussian_array(1.0, N, rng)
    pmf = discrete_gaussian_pmf(1.0)
    norm = math.fsum(math.exp(-z * z / 2) for z in range(-60, 61))
    assert pmf[0] == pytest.approx(1 / norm, abs=1e-12)
    for z in range(-3, 4):
        assert abs((draws == z).mean() - pmf[z]) <= 0.01


def test_discrete_gaussian_moments():
    rng = np.random.default_rng(6)
    draws = sample_discrete_gaussian_array(4.0, N, rng)
    assert abs(draws.mean()) <= 3 * math.sqrt(4 / N) * 1.5
    # the discrete Gaussian's variance is slightly below the parameter for small values
    pmf = discrete_gaussian_pmf(4.0)
    var = math.fsum(p * z * z for z, p in pmf.items())
    assert draws.var() == pytest.approx(var, rel=0.03)


def test_noise_params():
    assert NoiseParams(2.0, 8).client_variance == 16.0
    with pytest.raises(ParameterError):
        NoiseParams(-1, 2)
    with pytest.raises(ParameterError):
        NoiseParams(1, 0)
