"""Single-server decryption, aggregation and de-biasing for the three protocols."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import crypto
from .clients import count_init, count_report, count_update
from .crypto import Ciphertext, PrivateKey, PublicKey
from .dp import NoiseParams, RRParams, debias_count
from .errors import DecodeRangeError, MalformedReportError, ParameterError


@dataclass(frozen=True)
class CountEstimate:
    estimate: float
    n: int
    eps0: float
    true_value: int | None = None
    rejected: int = 0


@dataclass(frozen=True)
class HistogramEstimate:
    """``buckets[i]`` estimates devices with count ``i`` (``i < k``) or ``>= k`` (``i == k``)."""

    buckets: np.ndarray
    n: int
    eps0: float

    @property
    def k(self) -> int:
        return len(self.buckets) - 1


@dataclass(frozen=True)
class MeanEstimate:
    sum_estimate: float
    mean: float
    clip_bound: int
    n: int


def _as_array_ciphertext(reports) -> Ciphertext:
    if isinstance(reports, Ciphertext):
        return reports if reports.shape else crypto.stack([reports])
    reports = list(reports)
    if not reports:
        raise MalformedReportError("no reports supplied")
    return crypto.stack(reports)


def _decrypt_bits(reports: Ciphertext, priv: PrivateKey) -> np.ndarray:
    try:
        vals = np.asarray(crypto.dec(reports, priv, bound=1))
    except DecodeRangeError as exc:
        idx = _first_bad_index(reports, priv)
        raise MalformedReportError(f"report {idx} does not decrypt to a bit", index=idx) from exc
    bad = np.flatnonzero(vals.reshape(len(vals), -1).min(axis=1) < 0) if vals.ndim > 1 else np.flatnonzero(vals < 0)
    if bad.size:
        idx = int(bad[0])
        raise MalformedReportError(f"report {idx} does not decrypt to a bit", index=idx)
    return vals


def _first_bad_index(reports: Ciphertext, priv: PrivateKey) -> int | None:
    for i in range(len(reports)):
        try:
            v = np.asarray(crypto.dec(reports[i], priv, bound=1))
        except DecodeRangeError:
            return i
        if np.any(v < 0):
            return i
    return None


def estimate_count(
    reports: Ciphertext | Sequence[Ciphertext],
    priv: PrivateKey,
    rr: RRParams,
    true_value: int | None = None,
) -> CountEstimate:
    """Decrypt every report, sum the bits and de-bias."""
    cts = _as_array_ciphertext(reports)
    if len(cts.shape) != 1:
        raise MalformedReportError(f"expected one ciphertext per report, got shape {cts.shape}")
    bits = _decrypt_bits(cts, priv)
    n = len(bits)
    return CountEstimate(debias_count(float(bits.sum()), n, rr), n, rr.eps0, true_value)


def estimate_histogram(
    reports: Ciphertext | Sequence[Ciphertext],
    priv: PrivateKey,
    rr: RRParams,
    k: int | None = None,
) -> HistogramEstimate:
    """De-bias each bucket independently.

    ``reports`` is either a list of length-``(k+1)`` ciphertext vectors or an
    array ciphertext of shape ``(k+1, n)`` as produced by a batched client.
    """
    if isinstance(reports, Ciphertext):
        if len(reports.shape) != 2:
            raise MalformedReportError(f"expected shape (k+1, n), got {reports.shape}")
        cts = crypto.Ciphertext(
            reports.spec, np.asarray(reports.c1).T, np.asarray(reports.c2).T, np.asarray(reports.rerand_count).T
        )
    else:
        reports = list(reports)
        widths = {r.shape for r in reports}
        if len(widths) != 1 or len(next(iter(widths))) != 1:
            bad = next(i for i, r in enumerate(reports) if r.shape != reports[0].shape or len(r.shape) != 1)
            raise MalformedReportError(f"report {bad} has inconsistent length", index=bad)
        cts = crypto.stack(reports)
    if k is not None and cts.shape[1] != k + 1:
        raise MalformedReportError(f"reports have {cts.shape[1]} coordinates, expected {k + 1}")
    bits = _decrypt_bits(cts, priv)
    n = bits.shape[0]
    buckets = np.array([debias_count(float(s), n, rr) for s in bits.sum(axis=0)])
    return HistogramEstimate(buckets, n, rr.eps0)


def mean_decode_bound(n: int, k: int, sigma_total: float) -> int:
    """Decode range for the homomorphic sum: ``n k + 10`` total noise standard deviations."""
    return int(n * k + math.ceil(10 * sigma_total))


def estimate_mean(
    reports: Ciphertext | Sequence[Ciphertext],
    priv: PrivateKey,
    k: int,
    n: int | None = None,
    noise: NoiseParams | None = None,
) -> MeanEstimate:
    """Add all reports homomorphically and decode once."""
    cts = _as_array_ciphertext(reports)
    if n is None:
        n = len(cts)
    sigma_total = math.sqrt(n * noise.client_variance) if noise is not None else 0.0
    bound = mean_decode_bound(n, k, sigma_total)
    if bound > priv.spec.max_bound:
        raise DecodeRangeError(
            f"decode bound {bound} for n={n}, k={k} exceeds group {priv.spec.name!r} "
            f"range {priv.spec.max_bound}; use a larger group or fewer clients"
        )
    total = crypto.sum_ciphertexts(cts, axis=0)
    s = int(crypto.dec(total, priv, bound=bound))
    return MeanEstimate(float(s), s / n if n else 0.0, k, n)


def calibrate_mean_noise(eps: float, delta: float, k: int, n: int | None = None) -> NoiseParams:
    """Gaussian-mechanism noise for the clipped sum (sensitivity ``k``).

    Total noise standard deviation is ``k sqrt(2 ln(1.25/delta)) / eps``.
    Clients add variance ``k * sigma2`` each, so ``sigma2 = total_var / (k n)``
    spreads the budget over ``n`` clients; without ``n`` a single client
    carries all of it.
    """
    if not 0 < eps or not 0 < delta < 1:
        raise ParameterError(f"need eps > 0 and delta in (0, 1), got eps={eps}, delta={delta}")
    if k < 1:
        raise ParameterError(f"k must be at least 1, got {k}")
    total_var = total_noise_std(eps, delta, k) ** 2
    clients = 1 if n is None else n
    if clients < 1:
        raise ParameterError(f"n must be at least 1, got {n}")
    return NoiseParams(total_var / (k * clients), k)


def total_noise_std(eps: float, delta: float, k: int) -> float:
    return k * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


# ---------------------------------------------------------------------------
# Generic pipeline adapter
# ---------------------------------------------------------------------------


@dataclass
class CountPipeline:
    """CountNonZero behind an opaque initialize/update/report/estimate interface.

    States, reports and key material are treated as opaque values by callers,
    so a consumer of this object never touches group elements directly.
    """

    group: str = "test65521"
    eps0: float = math.inf
    fresh_enc: bool | None = None

    def keygen(self, rng):
        return crypto.keygen(crypto.get_group(self.group), rng)

    def initialize(self, pub: PublicKey, T: int, rng):
        return count_init(pub, T, rng, fresh_enc=self.fresh_enc, record_trace=False)

    def update(self, state, x: int, rng):
        return count_update(state, x, rng)

    def report(self, state, rng):
        return count_report(state, RRParams(self.eps0), rng)

    def estimate(self, reports, priv: PrivateKey) -> float:
        return estimate_count(reports, priv, RRParams(self.eps0)).estimate

    def clone_state(self, state):
        return replace(state, trace=None)

    def state_bytes(self, state) -> bytes:
        return state.snapshot()
