"""Randomized response, de-biasing, aggregator-model epsilon selection and an
exact discrete Gaussian sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ParameterError

_EPS0_CLAMP = 700.0


@dataclass(frozen=True)
class RRParams:
    """Randomized response with privacy parameter ``eps0``.

    The mechanism keeps the true bit with probability ``keep_prob`` and
    otherwise outputs a uniform bit, so each bit is flipped with probability
    ``flip_prob = 1/(e^eps0 + 1)``.  ``eps0 > 700`` (or ``inf``) is treated as
    pass-through.
    """

    eps0: float
    keep_prob: float = field(init=False)
    flip_prob: float = field(init=False)

    def __post_init__(self):
        eps0 = float(self.eps0)
        if not eps0 > 0:
            raise ParameterError(f"eps0 must be positive, got {self.eps0}")
        if eps0 > _EPS0_CLAMP:
            keep, flip = 1.0, 0.0
        else:
            keep = math.expm1(eps0) / (math.exp(eps0) + 1.0)
            flip = 1.0 / (math.exp(eps0) + 1.0)
        object.__setattr__(self, "keep_prob", keep)
        object.__setattr__(self, "flip_prob", flip)

    @property
    def q(self) -> float:
        return self.flip_prob

    @property
    def truth_prob(self) -> float:
        return 1.0 - self.flip_prob


def rr_bit(b, params: RRParams, rng: np.random.Generator):
    """Apply randomized response to a bit or an array of bits."""
    b = np.asarray(b)
    if np.any((b != 0) & (b != 1)):
        raise ParameterError("randomized response expects bits")
    keep = rng.random(b.shape) < params.keep_prob
    noise = rng.integers(0, 2, size=b.shape)
    out = np.where(keep, b, noise).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def debias_count(sum_of_responses: float, n: int, params: RRParams) -> float:
    """Unbiased estimate ``(sum - n q)/(1 - 2q)`` of the number of true ones."""
    if n == 0:
        return 0.0
    q = params.flip_prob
    return (sum_of_responses - n * q) / (1.0 - 2.0 * q)


def debias_variance(n: int, params: RRParams) -> float:
    """Variance of :func:`debias_count`, ``n q(1-q)/(1-2q)^2``."""
    q = params.flip_prob
    return n * q * (1.0 - q) / (1.0 - 2.0 * q) ** 2


def expected_error_bound(n: int, params: RRParams, C: float = 1.0) -> float:
    """Reference curve ``C sqrt(n (1 + e^eps0/(1+e^eps0)^2))``."""
    if n <= 0:
        return 0.0
    e = min(params.eps0, _EPS0_CLAMP)
    # e^x/(1+e^x)^2 written to stay finite for large x
    middle = 1.0 / (2.0 + math.exp(-e) + math.exp(e)) if e < _EPS0_CLAMP else 0.0
    return C * math.sqrt(n * (1.0 + middle))


def select_eps0_for_aggregator(eps: float, delta: float, n: int) -> RRParams:
    """Largest ``eps0`` whose n-fold randomized-response sum is (eps, delta)-DP.

    Uses the binomial-mechanism condition ``n (1 - keep_prob) >= 64 ln(4/delta) / eps^2``:
    the number of clients answering with a uniform bit must be large enough
    for the binomial noise alone to hide one client.  Solving for ``eps0``
    gives ``ln(2 n eps^2 / (64 ln(4/delta)) - 1)``; the result never drops
    below ``eps`` since local ``eps``-RR is already ``eps``-DP.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if n < 1:
        raise ParameterError(f"n must be at least 1, got {n}")
    ratio = 2.0 * n * eps * eps / (64.0 * math.log(4.0 / delta)) - 1.0
    eps0 = eps
    if ratio > 1.0:
        eps0 = max(eps, math.log(ratio))
    return RRParams(eps0)


@dataclass(frozen=True)
class NoiseParams:
    """Per-client noise for the averaging protocol.

    Each client adds discrete Gaussian noise of variance ``k * sigma2``.
    """

    sigma2: float
    k: int

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ParameterError(f"sigma2 must be nonnegative, got {self.sigma2}")
        if self.k < 1:
            raise ParameterError(f"k must be at least 1, got {self.k}")

    @property
    def client_variance(self) -> float:
        return self.k * self.sigma2


# ---------------------------------------------------------------------------
# Exact discrete Gaussian (Bernoulli-exp / discrete Laplace rejection)
# ---------------------------------------------------------------------------


def _uniform_below(rng: np.random.Generator, n: int) -> int:
    if n < (1 << 62):
        return int(rng.integers(0, n))
    bits = n.bit_length()
    nbytes = (bits + 7) // 8
    shift = nbytes * 8 - bits
    while True:
        x = int.from_bytes(rng.bytes(nbytes), "big") >> shift
        if x < n:
            return x


def _bernoulli(p: Fraction, rng: np.random.Generator) -> bool:
    return _uniform_below(rng, p.denominator) < p.numerator


def _bernoulli_exp_small(gamma: Fraction, rng: np.random.Generator) -> bool:
    # exp(-gamma) for gamma in [0, 1]
    k = 1
    while _bernoulli(gamma / k, rng):
        k += 1
    return k % 2 == 1


def bernoulli_exp(gamma: Fraction, rng: np.random.Generator) -> bool:
    """Exact Bernoulli(exp(-gamma)) for rational ``gamma >= 0``."""
    gamma = Fraction(gamma)
    while gamma > 1:
        if not _bernoulli_exp_small(Fraction(1), rng):
            return False
        gamma -= 1
    return _bernoulli_exp_small(gamma, rng)


def _discrete_laplace(t: int, rng: np.random.Generator) -> int:
    while True:
        u = _uniform_below(rng, t)
        if not bernoulli_exp(Fraction(u, t), rng):
            continue
        v = 0
        while bernoulli_exp(Fraction(1), rng):
            v += 1
        x = u + t * v
        negative = _bernoulli(Fraction(1, 2), rng)
        if negative and x == 0:
            continue
        return -x if negative else x


def sample_discrete_gaussian(variance: float, rng: np.random.Generator) -> int:
    """One exact sample from ``N_Z(0, variance)``; ``variance == 0`` gives 0."""
    if variance < 0:
        raise ParameterError(f"variance must be nonnegative, got {variance}")
    if variance == 0:
        return 0
    sigma2 = Fraction(variance)
    t = math.isqrt(math.floor(sigma2)) + 1
    while True:
        y = _discrete_laplace(t, rng)
        gamma = (abs(y) - sigma2 / t) ** 2 / (2 * sigma2)
        if bernoulli_exp(gamma, rng):
            return y


def sample_discrete_gaussian_array(variance: float, size: int, rng: np.random.Generator) -> np.ndarray:
    if variance < 0:
        raise ParameterError(f"variance must be nonnegative, got {variance}")
    if variance == 0:
        return np.zeros(size, dtype=np.int64)
    return np.fromiter((sample_discrete_gaussian(variance, rng) for _ in range(size)), dtype=np.int64, count=size)


def discrete_gaussian_pmf(variance: float, support: int | None = None) -> dict[int, float]:
    """Normalized pmf on ``[-support, support]`` by truncated summation."""
    if variance <= 0:
        return {0: 1.0}
    if support is None:
        support = int(math.ceil(12 * math.sqrt(variance))) + 10
    w = {z: math.exp(-z * z / (2 * variance)) for z in range(-support, support + 1)}
    total = math.fsum(w.values())
    return {z: v / total for z, v in w.items()}
