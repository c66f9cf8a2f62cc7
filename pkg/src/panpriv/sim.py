"""Experiment driver: stream generation, end-to-end runs, intrusion checks and
lower-bound tables.  Everything returned here is plain data ready for JSON or
CSV.

Randomness.  A run is fully determined by ``seed``.  The root
``SeedSequence(seed)`` spawns one child per trial, and each trial child spawns
independent streams for stream generation, key generation, the clients and
the servers.  Clients are simulated as one vectorized batch that shares the
trial's client stream.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import crypto
from .clients import average_report, hist_report, run_count_client, run_hist_client
from .dp import NoiseParams, RRParams, expected_error_bound, select_eps0_for_aggregator
from .errors import ConfigurationError
from .intrusion import (
    PROTOCOLS,
    client_trace,
    compare_structure,
    exact_count_trace_comparison,
    leaky_trace,
)
from .lowerbound import (
    baseline_estimate_error,
    run_distinguisher_experiment,
    tv_shifted_binomial,
    tv_upper_bound,
)
from .reduction import reduced_dec, reduced_enc, reduced_keygen, reduced_rerandomize
from .server import CountPipeline, calibrate_mean_noise, mean_decode_bound, estimate_count, estimate_histogram, estimate_mean
from .twoserver import FieldSpec, run_ts_client, ts_aggregate, ts_keygen

SCHEMA_VERSION = 1
STREAM_KINDS = ("bernoulli", "at-most-one", "fixed-count", "file")


# ---------------------------------------------------------------------------
# Streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamGenSpec:
    kind: str
    param: float | int | str | None = None
    independent: bool = True

    @classmethod
    def parse(cls, text: str) -> "StreamGenSpec":
        """``bernoulli:0.1``, ``at-most-one:0.5``, ``fixed-count:3`` or ``file:path``."""
        kind, _, arg = text.partition(":")
        if kind not in STREAM_KINDS:
            raise ConfigurationError(f"stream: unknown kind {kind!r}; choose from {STREAM_KINDS}")
        if kind == "file":
            if not arg:
                raise ConfigurationError("stream: file kind needs a path, e.g. file:streams.txt")
            return cls(kind, arg)
        try:
            value = int(arg) if kind == "fixed-count" else float(arg)
        except ValueError:
            raise ConfigurationError(f"stream: bad parameter {arg!r} for {kind}") from None
        if kind == "fixed-count" and value < 0:
            raise ConfigurationError("stream: fixed-count must be nonnegative")
        if kind != "fixed-count" and not 0 <= value <= 1:
            raise ConfigurationError(f"stream: probability for {kind} must lie in [0, 1]")
        return cls(kind, value)

    def __str__(self) -> str:
        return f"{self.kind}:{self.param}"


def read_stream_file(path: str | Path) -> np.ndarray:
    """Newline-delimited bit strings, one client per line; returns shape ``(T, n)``."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ConfigurationError(f"stream file {path} is empty")
    widths = {len(ln) for ln in lines}
    if len(widths) != 1:
        raise ConfigurationError(f"stream file {path}: lines have different lengths {sorted(widths)}")
    if any(set(ln) - {"0", "1"} for ln in lines):
        raise ConfigurationError(f"stream file {path}: only 0/1 characters are allowed")
    return np.array([[int(ch) for ch in ln] for ln in lines], dtype=np.int64).T


def generate_streams(spec: StreamGenSpec, n: int, T: int, rng: np.random.Generator) -> np.ndarray:
    """Bit streams of shape ``(T, n)``."""
    if spec.kind == "bernoulli":
        return (rng.random((T, n)) < spec.param).astype(np.int64)
    if spec.kind == "at-most-one":
        x = np.zeros((T, n), dtype=np.int64)
        has = rng.random(n) < spec.param
        pos = rng.integers(0, T, size=n)
        x[pos[has], np.flatnonzero(has)] = 1
        return x
    if spec.kind == "fixed-count":
        m = int(spec.param)
        if m > T:
            raise ConfigurationError(f"stream: fixed-count {m} exceeds horizon T={T}")
        keys = rng.random((T, n))
        ranks = np.argsort(np.argsort(keys, axis=0), axis=0)
        return (ranks < m).astype(np.int64)
    x = read_stream_file(spec.param)
    if x.shape != (T, n):
        raise ConfigurationError(f"stream file has {x.shape[1]} clients of length {x.shape[0]}, config asks for n={n}, T={T}")
    return x


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    protocol: str = "count"
    n: int = 1000
    T: int = 20
    k: int = 8
    eps0: float | None = None
    eps: float | None = None
    delta: float | None = None
    variance: float | None = None
    group: str = "test65521"
    field: int = FieldSpec().p
    stream: str = "bernoulli:0.05"
    seed: int = 0
    trials: int = 1
    fresh_enc: bool | None = None
    timing: bool = False

    def validate(self) -> None:
        errors = []
        if self.protocol not in PROTOCOLS:
            errors.append(f"protocol: must be one of {PROTOCOLS}, got {self.protocol!r}")
        for name in ("n", "T", "k", "trials"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name}: must be at least 1, got {getattr(self, name)}")
        if self.eps0 is not None and not self.eps0 > 0:
            errors.append(f"eps0: must be positive, got {self.eps0}")
        if self.eps is not None and not self.eps > 0:
            errors.append(f"eps: must be positive, got {self.eps}")
        if self.delta is not None and not 0 < self.delta < 1:
            errors.append(f"delta: must lie in (0, 1), got {self.delta}")
        if self.variance is not None and self.variance < 0:
            errors.append(f"variance: must be nonnegative, got {self.variance}")
        if self.group not in crypto.GROUPS:
            errors.append(f"group: unknown preset {self.group!r}; choose from {sorted(crypto.GROUPS)}")
        if self.protocol in ("count", "histogram", "count-2s") and self.eps0 is None and (self.eps is None or self.delta is None):
            errors.append("eps0: give --eps0, or both --eps and --delta for aggregator-model selection")
        if self.protocol == "mean" and self.variance is None and (self.eps is None or self.delta is None):
            errors.append("variance: give --variance, or both --eps and --delta for calibration")
        if self.protocol == "count-2s":
            try:
                FieldSpec(int(self.field))
            except ConfigurationError as exc:
                errors.append(f"field: {exc}")
            else:
                if int(self.field) <= 2 * self.n:
                    errors.append(f"field: modulus {self.field} must exceed 2n = {2 * self.n}")
        try:
            StreamGenSpec.parse(self.stream)
        except ConfigurationError as exc:
            errors.append(str(exc))
        if self.protocol == "mean" and not errors:
            sigma = math.sqrt(self.n * self.noise_params().client_variance)
            bound = mean_decode_bound(self.n, self.k, sigma)
            limit = crypto.GROUPS[self.group].max_bound
            if bound > limit:
                errors.append(f"n: sum decode bound {bound} exceeds group {self.group!r} range {limit}; "
                              "use fewer clients, a smaller k or the crypto-default group")
        if errors:
            raise ConfigurationError("; ".join(errors))

    def rr_params(self) -> RRParams:
        if self.eps0 is not None:
            return RRParams(self.eps0)
        return select_eps0_for_aggregator(self.eps, self.delta, self.n)

    def noise_params(self) -> NoiseParams:
        if self.variance is not None:
            return NoiseParams(self.variance / self.k, self.k)
        return calibrate_mean_noise(self.eps, self.delta, self.k, self.n)


@dataclass
class ExperimentResult:
    config: dict
    trials: list[dict]
    summary: dict
    schema_version: int = SCHEMA_VERSION
    wall_clock: float | None = None

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "config": self.config,
            "summary": self.summary,
            "trials": self.trials,
        }
        if self.wall_clock is not None:
            out["wall_clock"] = self.wall_clock
        return out

    def to_json(self) -> str:
        return json.dumps(to_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        rows = [{k: v for k, v in t.items() if not isinstance(v, list)} for t in self.trials]
        return rows_to_csv(rows)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def count_error_reference(n: int, rr: RRParams) -> float:
    """``3 sqrt(n q (1-q)) / (1 - 2q)``: three standard deviations of the de-biased count."""
    q = rr.flip_prob
    return 3.0 * math.sqrt(n * q * (1.0 - q)) / (1.0 - 2.0 * q)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def _trial_rngs(seed: int, trials: int):
    for child in np.random.SeedSequence(seed).spawn(trials):
        streams, keys, clients, servers = child.spawn(4)
        yield tuple(np.random.default_rng(s) for s in (streams, keys, clients, servers))


def _run_trial(cfg: ExperimentConfig, rr, noise, rngs) -> dict:
    r_stream, r_keys, r_client, r_server = rngs
    stream_spec = StreamGenSpec.parse(cfg.stream)
    X = generate_streams(stream_spec, cfg.n, cfg.T, r_stream)
    counts = X.sum(axis=0)
    spec = crypto.get_group(cfg.group)
    if cfg.protocol == "count":
        true = int((counts > 0).sum())
        pub, priv = crypto.keygen(spec, r_keys)
        _, rep = run_count_client(pub, X, rr, r_client, fresh_enc=cfg.fresh_enc, record_trace=False)
        est = estimate_count(rep, priv, rr, true).estimate
        return {"true_value": true, "estimate": est, "abs_error": abs(est - true)}
    if cfg.protocol == "count-2s":
        true = int((counts > 0).sum())
        field_spec = FieldSpec(int(cfg.field))
        keys, priv1, priv2 = ts_keygen(spec, r_keys)
        _, rep = run_ts_client(keys, X, rr, r_client, field=field_spec, fresh_enc=cfg.fresh_enc, record_trace=False)
        res = ts_aggregate(rep, priv1, priv2, rr, field=field_spec, challenge_rng=r_server, true_value=true)
        est = res.estimate.estimate
        return {"true_value": true, "estimate": est, "abs_error": abs(est - true),
                "accepted": res.accepted, "rejected": res.rejected}
    pub, priv = crypto.keygen(spec, r_keys)
    state = run_hist_client(pub, X, cfg.k, r_client, fresh_enc=cfg.fresh_enc, record_trace=False)
    clipped = np.minimum(counts, cfg.k)
    if cfg.protocol == "histogram":
        true = np.bincount(clipped, minlength=cfg.k + 1)
        rep = hist_report(state, rr, r_client)
        buckets = estimate_histogram(rep, priv, rr, cfg.k).buckets
        errs = np.abs(buckets - true)
        return {"true_value": true.tolist(), "estimate": buckets.tolist(),
                "abs_error": float(errs.mean()), "max_bucket_error": float(errs.max()),
                "bucket_errors": errs.tolist()}
    true = int(clipped.sum())
    rep = average_report(state, noise, r_client)
    est = estimate_mean(rep, priv, cfg.k, cfg.n, noise)
    return {"true_value": true, "estimate": est.sum_estimate, "abs_error": abs(est.sum_estimate - true),
            "mean": est.mean, "true_mean": true / cfg.n}


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Generate streams, run every client, aggregate and compare to the plaintext truth."""
    config.validate()
    start = time.perf_counter()
    rr = config.rr_params() if config.protocol != "mean" else None
    noise = config.noise_params() if config.protocol == "mean" else None
    trials = []
    for i, rngs in enumerate(_trial_rngs(config.seed, config.trials)):
        rec = {"trial": i}
        rec.update(_run_trial(config, rr, noise, rngs))
        trials.append(rec)
    errs = np.array([t["abs_error"] for t in trials], dtype=float)
    summary = {"mean_abs_error": float(errs.mean()), "max_abs_error": float(errs.max())}
    if rr is not None:
        summary["eps0"] = rr.eps0
        summary["error_reference"] = count_error_reference(config.n, rr)
        summary["expected_error_bound"] = expected_error_bound(config.n, rr)
    if noise is not None:
        summary["client_variance"] = noise.client_variance
        summary["total_noise_std"] = math.sqrt(config.n * noise.client_variance)
    if config.protocol == "histogram":
        summary["max_bucket_error"] = float(max(t["max_bucket_error"] for t in trials))
    if config.protocol == "count-2s":
        summary["rejected"] = int(sum(t["rejected"] for t in trials))
    elapsed = time.perf_counter() - start
    return ExperimentResult(asdict(config), trials, summary, wall_clock=elapsed if config.timing else None)


def parse_bits(text: str) -> list[int]:
    bits = [int(ch) for ch in text.strip() if ch in "01"]
    if len(bits) != len(text.strip()):
        raise ConfigurationError(f"stream {text!r}: only 0/1 characters are allowed")
    return bits


def run_intrusion_check(
    protocol: str,
    stream_a,
    stream_b,
    *,
    group: str = "test65521",
    k: int = 4,
    seed: int = 0,
    fresh_enc: bool | None = None,
    exact_group: str = "test11",
) -> dict:
    """Structural comparison of two traces, plus exact trace laws for short count streams.

    ``protocol == "count-leaky"`` runs the broken negative-control client.
    """
    a, b = [int(x) for x in stream_a], [int(x) for x in stream_b]
    if len(a) != len(b):
        raise ConfigurationError("streams must have equal length")
    rng = np.random.default_rng(seed)
    if protocol == "count-leaky":
        ta, tb = leaky_trace(a, rng, group=group), leaky_trace(b, rng, group=group)
    else:
        spec = crypto.get_group(group)
        if protocol == "count-2s":
            keys = ts_keygen(spec, rng)[0]
        elif protocol in PROTOCOLS:
            keys = crypto.keygen(spec, rng)[0]
        else:
            raise ConfigurationError(f"protocol: unknown {protocol!r}")
        ta = client_trace(protocol, a, rng, group=group, k=k, fresh_enc=fresh_enc, keys=keys)
        tb = client_trace(protocol, b, rng, group=group, k=k, fresh_enc=fresh_enc, keys=keys)
    rep = compare_structure(ta, tb)
    out = {
        "schema_version": SCHEMA_VERSION,
        "protocol": protocol,
        "group": group,
        "stream_a": "".join(map(str, a)),
        "stream_b": "".join(map(str, b)),
        "structural": {"passed": rep.passed, "first_difference": rep.first_difference, "message": rep.message,
                       "sizes_a": ta.sizes(), "sizes_b": tb.sizes()},
    }
    if protocol in ("count", "count-leaky") and len(a) <= 3:
        ex = exact_count_trace_comparison(a, b, group=exact_group, fresh_enc=bool(fresh_enc),
                                          key_seed=seed, leaky=protocol == "count-leaky")
        out["exact"] = {"group": ex.group, "equal": ex.equal, "tv": ex.tv,
                        "normalized_equal": ex.normalized_equal, "normalized_tv": ex.normalized_tv}
    out["passed"] = bool(rep.passed and out.get("exact", {}).get("equal", True))
    return out


def run_lowerbound_table(
    T_list,
    eps_list,
    *,
    trials: int = 10_000,
    seed: int = 0,
) -> list[dict]:
    """Exact TV, closed forms and the empirical baseline TV per ``(T, eps)``."""
    rows = []
    ss = np.random.SeedSequence(seed)
    grid = [(int(T), float(e)) for e in eps_list for T in T_list]
    for (T, eps), child in zip(grid, ss.spawn(len(grid))):
        p = RRParams(eps).flip_prob
        if T >= 2 and p > 0:
            rep = tv_shifted_binomial(T, min(p, 0.5))
            tv, closed, stated, ub = rep.tv_exact, rep.demoivre_value, rep.stated_value, rep.upper_bound
        else:
            tv = closed = 1.0 - 2.0 * p if p > 0 else 1.0
            stated = 2.0 * closed
            ub = tv_upper_bound(T, p) if p > 0 else math.inf
        emp = run_distinguisher_experiment(T, eps, trials, np.random.default_rng(child))
        rows.append({
            "T": T, "eps": eps, "p": p, "tv_exact": tv, "demoivre": closed, "stated_factor2": stated,
            "upper_bound": ub, "empirical_tv": emp.tv_hat, "ci_low": emp.ci_low, "ci_high": emp.ci_high,
            "threshold": emp.threshold,
        })
    return rows


def run_gap_table(
    n: int,
    T_list,
    eps: float,
    *,
    trials: int = 50,
    seed: int = 0,
    group: str = "test65521",
    event_prob: float = 0.5,
) -> list[dict]:
    """Baseline versus encrypted-pipeline CountNonZero error on at-most-one streams."""
    rows = []
    for i, T in enumerate(T_list):
        base = baseline_estimate_error(n, int(T), eps, trials, np.random.default_rng([seed, i]),
                                       event_prob=event_prob)
        cfg = ExperimentConfig(protocol="count", n=n, T=int(T), eps0=eps, group=group,
                               stream=f"at-most-one:{event_prob}", seed=seed + i, trials=trials, fresh_enc=True)
        crypto_err = run_experiment(cfg).summary["mean_abs_error"]
        rows.append({"n": n, "T": int(T), "eps": eps, "baseline_error": base.mean_abs_error,
                     "baseline_se": base.std_error, "crypto_error": crypto_err, "threshold": base.tau})
    return rows


def run_reduction_demo(
    n: int = 200,
    T: int = 10,
    eps0: float = math.inf,
    trials: int = 100,
    *,
    seed: int = 0,
    group: str = "test65521",
) -> dict:
    """Round trips ``dec(rerandomize^j(enc(b)))`` with random ``b`` and ``j <= T - 1``."""
    rng = np.random.default_rng(seed)
    pipeline = CountPipeline(group=group, eps0=eps0)
    keys = reduced_keygen(n, T, pipeline, rng)
    records = []
    for i in range(trials):
        b = int(rng.integers(0, 2))
        j = int(rng.integers(0, T))
        c = reduced_enc(b, keys.public, rng)
        for _ in range(j):
            c = reduced_rerandomize(c, keys.public, rng)
        out = reduced_dec(c, keys.private, rng)
        records.append({"trial": i, "bit": b, "rerandomizations": j, "decrypted": out})
    failures = sum(r["bit"] != r["decrypted"] for r in records)
    return {"schema_version": SCHEMA_VERSION, "n": n, "T": T, "eps0": eps0 if math.isfinite(eps0) else "inf",
            "trials": trials, "failures": failures, "error_rate": failures / trials, "records": records}
