"""Exact binomial numerics behind the pan-privacy lower bound, and the empirical
distinguisher against an information-theoretic baseline client.

The central quantity is the total variation distance between ``Bin(T, p)``
and ``Bin(T-1, p) + Bern(1-p)``: the number of ones in the randomized-response
trace of an all-zero stream versus a stream with one event.  With
``nu = ceil(T p)`` it has the closed form

    TV = (1 - 2p) * (nu / (T p)) * P[Bin(T, p) = nu],

which follows from De Moivre's formula for the binomial mean absolute
deviation, ``E|X - T p| = 2 nu (1 - p) P[X = nu]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from .dp import RRParams, rr_bit
from .errors import ParameterError

_EXACT_T = 1000


def binom_pmf(T: int, p: float, m: int) -> float:
    """``C(T, m) p^m (1-p)^(T-m)``; zero outside ``[0, T]``.

    Exact binomial coefficients are used up to ``T = 1000``; beyond that the
    log-space evaluation of scipy takes over.
    """
    if m < 0 or m > T:
        return 0.0
    if T <= _EXACT_T:
        return float(math.comb(T, m)) * p**m * (1.0 - p) ** (T - m)
    return float(stats.binom.pmf(m, T, p))


def binom_pmf_vector(T: int, p: float) -> np.ndarray:
    if T <= _EXACT_T:
        return np.array([binom_pmf(T, p, m) for m in range(T + 1)])
    return stats.binom.pmf(np.arange(T + 1), T, p)


def ceil_tp(T: int, p: float) -> int:
    """``ceil(T p)`` evaluated exactly on the binary value of ``p``."""
    return math.ceil(Fraction(p) * T)


def shifted_pmf(T: int, p: float) -> np.ndarray:
    """pmf of ``Bin(T-1, p) + Bern(1-p)`` on ``0..T``."""
    base = binom_pmf_vector(T - 1, p)
    out = np.zeros(T + 1)
    out[:-1] += base * p
    out[1:] += base * (1.0 - p)
    return out


@dataclass(frozen=True)
class TvReport:
    T: int
    p: float
    tv_exact: float
    demoivre_value: float
    upper_bound: float
    stated_value: float  # the same closed form with an extra leading factor 2

    @property
    def stated_consistent(self) -> bool:
        return abs(self.stated_value - self.tv_exact) <= 1e-10


def _check_tp(T: int, p: float, t_min: int, p_max: float) -> None:
    if T < t_min:
        raise ParameterError(f"T must be at least {t_min}, got {T}")
    if not 0 < p <= p_max:
        raise ParameterError(f"p must lie in (0, {p_max}], got {p}")


def tv_closed_form(T: int, p: float) -> float:
    nu = ceil_tp(T, p)
    return (1.0 - 2.0 * p) * (nu / (T * p)) * binom_pmf(T, p, nu)


def tv_upper_bound(T: int, p: float) -> float:
    return (1.0 - 2.0 * p) / math.sqrt(4.0 * p * (1.0 - p) * T)


def tv_shifted_binomial(T: int, p: float) -> TvReport:
    """Exact TV between ``Bin(T, p)`` and ``Bin(T-1, p) + Bern(1-p)``."""
    _check_tp(T, p, 2, 0.5)
    a = binom_pmf_vector(T, p)
    b = shifted_pmf(T, p)
    tv = 0.5 * math.fsum(np.abs(a - b))
    closed = tv_closed_form(T, p)
    return TvReport(T, p, tv, closed, tv_upper_bound(T, p), 2.0 * closed)


def demoivre_mad(T: int, p: float) -> float:
    """``2 ceil(Tp) (1-p) P[Bin(T,p) = ceil(Tp)]``."""
    _check_tp(T, p, 1, 1.0 - 1e-15)
    nu = ceil_tp(T, p)
    return 2.0 * nu * (1.0 - p) * binom_pmf(T, p, nu)


def direct_mad(T: int, p: float) -> float:
    """``E|X - T p|`` for ``X ~ Bin(T, p)`` by direct summation."""
    pmf = binom_pmf_vector(T, p)
    tp = T * p
    return math.fsum(pmf[m] * abs(m - tp) for m in range(T + 1))


# ---------------------------------------------------------------------------
# Baseline client and the distinguisher
# ---------------------------------------------------------------------------


@dataclass
class BaselineClientState:
    """Stores ``RR_eps`` of every input on arrival; nothing else.

    Defined for streams with at most one event, where the stored trace is
    information-theoretically ``2 eps``-private between any two streams.
    """

    eps: float
    responses: list[int] = field(default_factory=list)
    step: int = 0

    @property
    def params(self) -> RRParams:
        return RRParams(self.eps)

    def update(self, x: int, rng: np.random.Generator) -> "BaselineClientState":
        self.responses.append(int(rr_bit(int(x), self.params, rng)))
        self.step += 1
        return self

    def output(self, threshold: int) -> int:
        return int(sum(self.responses) >= threshold)


def distinguisher_threshold(T: int, eps: float) -> int:
    """Most powerful count threshold ``max(1, ceil(T p))`` with ``p = 1/(e^eps + 1)``."""
    p = RRParams(eps).flip_prob
    return max(1, ceil_tp(T, p)) if p > 0 else 1


@dataclass(frozen=True)
class DistinguisherResult:
    T: int
    eps: float
    trials: int
    tv_hat: float
    ci_low: float
    ci_high: float
    tv_exact: float
    threshold: int


def baseline_streams(T: int, trials: int, b: int, rng: np.random.Generator) -> np.ndarray:
    """``trials`` streams: all zero (``b = 0``) or a single one at a uniform step (``b = 1``)."""
    x = np.zeros((trials, T), dtype=np.int64)
    if b:
        x[np.arange(trials), rng.integers(0, T, size=trials)] = 1
    return x


def run_distinguisher_experiment(
    T: int,
    eps: float,
    trials: int,
    rng: np.random.Generator,
    *,
    bootstrap: int = 2000,
    level: float = 0.95,
) -> DistinguisherResult:
    """Empirical TV between the baseline outputs on ``Distinguisher(0)`` and ``Distinguisher(1)``.

    Each trial runs a fresh baseline client over the whole stream (vectorized
    across trials); its output is the thresholded count of one-responses.
    The confidence interval is a parametric bootstrap of the two output rates.
    """
    if T < 1:
        raise ParameterError(f"T must be at least 1, got {T}")
    params = RRParams(eps)
    tau = distinguisher_threshold(T, eps)
    outs = []
    for b in (0, 1):
        resp = rr_bit(baseline_streams(T, trials, b, rng), params, rng)
        outs.append(np.asarray(resp).sum(axis=1) >= tau)
    r0, r1 = float(outs[0].mean()), float(outs[1].mean())
    boot = rng.binomial(trials, r1, size=bootstrap) / trials - rng.binomial(trials, r0, size=bootstrap) / trials
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(boot, [alpha, 1.0 - alpha])
    p = params.flip_prob
    if T == 1:
        exact = 1.0 - 2.0 * p
    elif p == 0:
        exact = 1.0
    else:
        exact = tv_shifted_binomial(T, p).tv_exact
    return DistinguisherResult(T, eps, trials, r1 - r0, float(lo), float(hi), exact, tau)


# ---------------------------------------------------------------------------
# CountNonZero from baseline outputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdDecoder:
    tau: int
    a0: float  # P[output = 1 | no event]
    a1: float  # P[output = 1 | one event]

    def estimate(self, ones: float, n: int) -> float:
        return (ones - n * self.a0) / (self.a1 - self.a0)


def _tail(pmf: np.ndarray, tau: int) -> float:
    return math.fsum(pmf[tau:])


def best_threshold_decoder(T: int, eps: float) -> ThresholdDecoder:
    """Threshold minimizing the per-client noise-to-signal ratio ``sqrt(a0(1-a0))/(a1-a0)``."""
    p = RRParams(eps).flip_prob
    if p == 0:
        return ThresholdDecoder(1, 0.0, 1.0)
    pmf0 = binom_pmf_vector(T, p)
    pmf1 = shifted_pmf(T, p) if T > 1 else np.array([p, 1.0 - p])
    best = None
    for tau in range(1, T + 1):
        a0, a1 = _tail(pmf0, tau), _tail(pmf1, tau)
        if a1 - a0 <= 0:
            continue
        score = math.sqrt(a0 * (1.0 - a0)) / (a1 - a0)
        if best is None or score < best[0]:
            best = (score, ThresholdDecoder(tau, a0, a1))
    return best[1]


@dataclass(frozen=True)
class BaselineErrorRow:
    n: int
    T: int
    eps: float
    trials: int
    mean_abs_error: float
    std_error: float
    tau: int


def baseline_estimate_error(
    n: int,
    T: int,
    eps: float,
    trials: int,
    rng: np.random.Generator,
    *,
    event_prob: float = 0.5,
) -> BaselineErrorRow:
    """Mean absolute CountNonZero error of ``n`` baseline clients.

    Streams have at most one event; a client has one with probability
    ``event_prob`` at a uniform step.  Each client's count of one-responses is
    drawn from its exact law (``Bin(T - x, p) + x Bern(1 - p)``), which is the
    sufficient statistic of the stored trace.
    """
    dec = best_threshold_decoder(T, eps)
    p = RRParams(eps).flip_prob
    errs = np.empty(trials)
    for i in range(trials):
        has = rng.random(n) < event_prob
        counts = rng.binomial(T - has.astype(np.int64), p) + (has & (rng.random(n) >= p))
        ones = float((counts >= dec.tau).sum())
        errs[i] = abs(dec.estimate(ones, n) - has.sum())
    return BaselineErrorRow(n, T, eps, trials, float(errs.mean()), float(errs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0, dec.tau)
