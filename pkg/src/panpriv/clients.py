"""Single-server client state machines: CountNonZero, histogram counter and
averaging.

Every state may describe one client or a batch of clients in lock step: pass
``batch=n`` at init and feed bit arrays of shape ``(n,)`` to the updates.
Scalar states take the branch a literal device would take; batched states
evaluate both branches and select per client.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import crypto
from .crypto import Ciphertext, PublicKey
from .dp import NoiseParams, RRParams, sample_discrete_gaussian_array, sample_discrete_gaussian
from .errors import ParameterError, ProtocolError


@dataclass
class StateTrace:
    """Serialized snapshots ``(step, bytes)`` an intruder could read, one per step."""

    snapshots: list[tuple[int, bytes]] = field(default_factory=list)

    def append(self, step: int, blob: bytes) -> None:
        self.snapshots.append((step, blob))

    def __len__(self) -> int:
        return len(self.snapshots)

    def sizes(self) -> list[int]:
        return [len(b) for _, b in self.snapshots]

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"step": s, "blob_hash": hashlib.sha256(b).hexdigest(), "blob_size": len(b)})
            for s, b in self.snapshots
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def _resolve_fresh(pub: PublicKey, fresh_enc: bool | None) -> bool:
    return pub.spec.kind == "crypto" if fresh_enc is None else bool(fresh_enc)


def _batch_shape(batch) -> tuple[int, ...]:
    if batch is None:
        return ()
    return tuple(np.atleast_1d(batch).tolist())


def _check_bits(x) -> None:
    arr = np.asarray(x)
    if np.any((arr != 0) & (arr != 1)):
        raise ParameterError("stream entries must be bits")


def fresh_rerandomized(m, pub: PublicKey, times: int, rng, fresh_enc: bool, shape=None) -> Ciphertext:
    """``Rerandomize^times(enc(m))``, or a plain ``enc(m)`` counted as ``times`` when ``fresh_enc``."""
    c = crypto.enc(m, pub, rng, shape=shape)
    if fresh_enc:
        return c.with_count(times)
    return crypto.rerandomize(c, pub, rng, times=times)


def _branch(x, one, zero):
    """Return ``one()`` where ``x == 1`` and ``zero()`` elsewhere."""
    if np.ndim(x) == 0:
        return one() if int(x) else zero()
    x = np.asarray(x)
    if x.all():
        return one()
    if not x.any():
        return zero()
    return crypto.select(x.astype(bool), one(), zero())


def _rr_select(kept: Ciphertext, pub: PublicKey, rr: RRParams, rng, times: int, fresh_enc: bool) -> Ciphertext:
    """Encrypted randomized response: keep ``kept`` or substitute a uniform-bit encryption."""
    shape = kept.shape
    keep = rng.random(shape) < rr.keep_prob
    bits = rng.integers(0, 2, size=shape)
    if np.ndim(keep) == 0:
        keep, bits = bool(keep), int(bits)
    if np.all(keep):
        return kept
    other = fresh_rerandomized(bits, pub, times, rng, fresh_enc, shape=shape)
    return crypto.select(keep, kept, other)


# ---------------------------------------------------------------------------
# CountNonZero
# ---------------------------------------------------------------------------


@dataclass
class CountClientState:
    pub: PublicKey
    T: int
    c: Ciphertext
    step: int = 0
    fresh_enc: bool = False
    trace: StateTrace | None = None

    def snapshot(self) -> bytes:
        return crypto.ciphertext_bytes(self.c)


def count_init(
    pub: PublicKey,
    T: int,
    rng: np.random.Generator,
    *,
    batch=None,
    fresh_enc: bool | None = None,
    record_trace: bool = True,
) -> CountClientState:
    if T < 1:
        raise ParameterError(f"horizon T must be at least 1, got {T}")
    shape = _batch_shape(batch)
    c = crypto.enc(np.zeros(shape, dtype=np.int64) if shape else 0, pub, rng)
    state = CountClientState(pub, T, c, 0, _resolve_fresh(pub, fresh_enc), StateTrace() if record_trace else None)
    if state.trace is not None:
        state.trace.append(0, state.snapshot())
    return state


def count_update(state: CountClientState, x, rng: np.random.Generator) -> CountClientState:
    if state.step >= state.T:
        raise ProtocolError(f"update past horizon T={state.T}")
    _check_bits(x)
    t = state.step + 1
    pub = state.pub
    state.c = _branch(
        x,
        lambda: fresh_rerandomized(
            np.ones(state.c.shape, dtype=np.int64) if state.c.shape else 1, pub, t, rng, state.fresh_enc
        ),
        lambda: crypto.rerandomize(state.c, pub, rng),
    )
    state.step = t
    if state.trace is not None:
        state.trace.append(t, state.snapshot())
    return state


def count_report(state: CountClientState, rr: RRParams, rng: np.random.Generator) -> Ciphertext:
    """Encrypted ``RR_eps0`` of the OR-bit; both branches carry count ``T + 1``."""
    if state.step != state.T:
        raise ProtocolError(f"report requested at step {state.step}, expected {state.T}")
    kept = crypto.rerandomize(state.c, state.pub, rng)
    return _rr_select(kept, state.pub, rr, rng, state.T + 1, state.fresh_enc)


def run_count_client(pub, stream, rr, rng, *, fresh_enc=None, record_trace=True):
    """Drive one client (or a batch, if ``stream`` is 2-D ``(T, n)``) end to end."""
    stream = np.asarray(stream)
    batch = stream.shape[1:] or None
    state = count_init(pub, stream.shape[0], rng, batch=batch, fresh_enc=fresh_enc, record_trace=record_trace)
    for x in stream:
        count_update(state, x, rng)
    return state, count_report(state, rr, rng)


# ---------------------------------------------------------------------------
# Histogram counter and averaging
# ---------------------------------------------------------------------------


@dataclass
class HistClientState:
    """``c[i]`` encrypts ``1(m == i)`` and ``d[i]`` encrypts ``1(m >= i)`` for the running count ``m``.

    Both vectors are stored as ciphertext arrays of shape ``(k + 1, *batch)``.
    """

    pub: PublicKey
    k: int
    T: int
    c: Ciphertext
    d: Ciphertext
    step: int = 0
    fresh_enc: bool = False
    trace: StateTrace | None = None

    def snapshot(self) -> bytes:
        return crypto.ciphertext_bytes(self.c) + crypto.ciphertext_bytes(self.d)


def _unit(k: int, shape: tuple[int, ...]) -> np.ndarray:
    e0 = np.zeros((k + 1,) + shape, dtype=np.int64)
    e0[0] = 1
    return e0


def hist_init(
    pub: PublicKey,
    k: int,
    T: int,
    rng: np.random.Generator,
    *,
    batch=None,
    fresh_enc: bool | None = None,
    record_trace: bool = True,
) -> HistClientState:
    if k < 1:
        raise ParameterError(f"k must be at least 1, got {k}")
    if T < 1:
        raise ParameterError(f"horizon T must be at least 1, got {T}")
    shape = _batch_shape(batch)
    c = crypto.enc(_unit(k, shape), pub, rng)
    d = crypto.enc(_unit(k, shape), pub, rng)
    state = HistClientState(pub, k, T, c, d, 0, _resolve_fresh(pub, fresh_enc), StateTrace() if record_trace else None)
    if state.trace is not None:
        state.trace.append(0, state.snapshot())
    return state


def _shift(v: Ciphertext, reset: Ciphertext, pub: PublicKey, rng) -> Ciphertext:
    # downward shift from pre-update values: new[i] = Rerandomize(old[i-1]), new[0] = reset
    moved = crypto.rerandomize(v[:-1], pub, rng)
    return crypto.concatenate([_expand(reset), moved])


def _expand(c: Ciphertext) -> Ciphertext:
    return Ciphertext(
        c.spec,
        np.asarray(c.c1)[None, ...],
        np.asarray(c.c2)[None, ...],
        np.asarray(c.rerand_count)[None, ...],
    )


def hist_update(state: HistClientState, x, rng: np.random.Generator) -> HistClientState:
    if state.step >= state.T:
        raise ProtocolError(f"update past horizon T={state.T}")
    _check_bits(x)
    t = state.step + 1
    pub = state.pub
    batch = state.c.shape[1:]

    def one():
        c0 = fresh_rerandomized(np.zeros(batch, dtype=np.int64) if batch else 0, pub, t, rng, state.fresh_enc)
        d0 = fresh_rerandomized(np.ones(batch, dtype=np.int64) if batch else 1, pub, t, rng, state.fresh_enc)
        return _shift(state.c, c0, pub, rng), _shift(state.d, d0, pub, rng)

    def zero():
        return crypto.rerandomize(state.c, pub, rng), crypto.rerandomize(state.d, pub, rng)

    if np.ndim(x) == 0:
        state.c, state.d = one() if int(x) else zero()
    else:
        x = np.asarray(x).astype(bool)
        if x.all():
            state.c, state.d = one()
        elif not x.any():
            state.c, state.d = zero()
        else:
            (c1, d1), (c0, d0) = one(), zero()
            state.c = crypto.select(x, c1, c0)
            state.d = crypto.select(x, d1, d0)
    state.step = t
    if state.trace is not None:
        state.trace.append(t, state.snapshot())
    return state


def hist_values(state: HistClientState) -> Ciphertext:
    """``(c_0, ..., c_{k-1}, d_k)``: one-hot over ``min(m, k)``."""
    return crypto.concatenate([state.c[: state.k], _expand(state.d[state.k])])


def hist_report(state: HistClientState, rr: RRParams, rng: np.random.Generator) -> Ciphertext:
    """Per-coordinate encrypted randomized response over :func:`hist_values`."""
    if state.step != state.T:
        raise ProtocolError(f"report requested at step {state.step}, expected {state.T}")
    kept = crypto.rerandomize(hist_values(state), state.pub, rng)
    return _rr_select(kept, state.pub, rr, rng, state.T + 1, state.fresh_enc)


def average_report(state: HistClientState, noise: NoiseParams, rng: np.random.Generator) -> Ciphertext:
    """Encryption of ``min(m, k) + r`` with ``r ~ N_Z(0, k sigma2)``."""
    if state.step != state.T:
        raise ProtocolError(f"report requested at step {state.step}, expected {state.T}")
    if noise.k != state.k:
        raise ParameterError(f"noise k={noise.k} does not match client k={state.k}")
    v = hist_values(state)
    batch = v.shape[1:]
    weights = np.arange(state.k + 1, dtype=np.int64).reshape((-1,) + (1,) * len(batch))
    total = crypto.sum_ciphertexts(crypto.scalar_mul(weights, v), axis=0)
    var = noise.client_variance
    if batch:
        r = sample_discrete_gaussian_array(var, int(np.prod(batch)), rng).reshape(batch)
    else:
        r = sample_discrete_gaussian(var, rng)
    return crypto.add_ciphertexts(total, crypto.enc(r, state.pub, rng))


def run_hist_client(pub, stream, k, rng, *, fresh_enc=None, record_trace=True) -> HistClientState:
    stream = np.asarray(stream)
    batch = stream.shape[1:] or None
    state = hist_init(pub, k, stream.shape[0], rng, batch=batch, fresh_enc=fresh_enc, record_trace=record_trace)
    for x in stream:
        hist_update(state, x, rng)
    return state
