"""What an intruder sees: structural trace comparison and exact trace laws.

The exact check enumerates every random draw a client makes.  Randomness is
supplied by :class:`ScriptedRng`, which replays a prefix of choices and asks
to branch at the first unscripted draw, so each run of a state transition
yields one outcome with its exact probability.  Because client states form
a Markov chain, the law of a whole trace is assembled from per-step kernels
over distinct serialized states.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from . import crypto
from .clients import StateTrace, count_init, count_update, hist_init, hist_update
from .crypto import PrivateKey, PublicKey
from .errors import ConfigurationError
from .twoserver import FieldSpec, ts_client_init, ts_client_update, ts_keygen

PROTOCOLS = ("count", "histogram", "mean", "count-2s")


# ---------------------------------------------------------------------------
# Structural comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StructuralReport:
    passed: bool
    length_a: int
    length_b: int
    first_difference: int | None
    message: str


def compare_structure(a: StateTrace, b: StateTrace) -> StructuralReport:
    """Equal length and equal per-snapshot byte sizes."""
    if len(a) != len(b):
        return StructuralReport(False, len(a), len(b), min(len(a), len(b)), f"trace lengths differ: {len(a)} vs {len(b)}")
    for (step_a, blob_a), (step_b, blob_b) in zip(a.snapshots, b.snapshots):
        if step_a != step_b or len(blob_a) != len(blob_b):
            return StructuralReport(
                False, len(a), len(b), step_a,
                f"step {step_a}: snapshot sizes {len(blob_a)} vs {len(blob_b)}",
            )
    return StructuralReport(True, len(a), len(b), None, "structurally identical")


def client_trace(
    protocol: str,
    stream,
    rng: np.random.Generator,
    *,
    group: str = "test65521",
    k: int = 4,
    field: FieldSpec = FieldSpec(),
    fresh_enc: bool | None = None,
    keys=None,
) -> StateTrace:
    """Run one client of ``protocol`` over ``stream`` and return its state trace."""
    spec = crypto.get_group(group)
    stream = [int(x) for x in stream]
    T = len(stream)
    if protocol == "count":
        pub = keys if keys is not None else crypto.keygen(spec, rng)[0]
        st = count_init(pub, T, rng, fresh_enc=fresh_enc)
        for x in stream:
            count_update(st, x, rng)
        return st.trace
    if protocol in ("histogram", "mean"):
        pub = keys if keys is not None else crypto.keygen(spec, rng)[0]
        st = hist_init(pub, k, T, rng, fresh_enc=fresh_enc)
        for x in stream:
            hist_update(st, x, rng)
        return st.trace
    if protocol == "count-2s":
        tkeys = keys if keys is not None else ts_keygen(spec, rng)[0]
        st = ts_client_init(tkeys, T, rng, field=field, fresh_enc=fresh_enc)
        for x in stream:
            ts_client_update(st, x, rng)
        return st.trace
    raise ConfigurationError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")


# ---------------------------------------------------------------------------
# Negative control
# ---------------------------------------------------------------------------


@dataclass
class LeakyCountState:
    """A broken CountNonZero client that also keeps a plaintext log of event steps."""

    inner: object
    events: list[int] = field(default_factory=list)
    trace: StateTrace | None = None

    def snapshot(self) -> bytes:
        return self.inner.snapshot() + bytes(self.events)


def leaky_count_init(pub: PublicKey, T: int, rng, *, fresh_enc=None, record_trace=True) -> LeakyCountState:
    inner = count_init(pub, T, rng, fresh_enc=fresh_enc, record_trace=False)
    st = LeakyCountState(inner, [], StateTrace() if record_trace else None)
    if st.trace is not None:
        st.trace.append(0, st.snapshot())
    return st


def leaky_count_update(st: LeakyCountState, x: int, rng) -> LeakyCountState:
    count_update(st.inner, x, rng)
    if int(x):
        st.events.append(st.inner.step)
    if st.trace is not None:
        st.trace.append(st.inner.step, st.snapshot())
    return st


def leaky_trace(stream, rng, *, group: str = "test65521") -> StateTrace:
    pub = crypto.keygen(crypto.get_group(group), rng)[0]
    st = leaky_count_init(pub, len(stream), rng)
    for x in stream:
        leaky_count_update(st, int(x), rng)
    return st.trace


# ---------------------------------------------------------------------------
# Exhaustive enumeration
# ---------------------------------------------------------------------------


class _Branch(Exception):
    def __init__(self, width: int):
        super().__init__(width)
        self.width = width


class ScriptedRng:
    """Stand-in for ``numpy.random.Generator`` that replays integer draws.

    Only uniform integer draws can be enumerated; continuous draws raise.
    """

    def __init__(self, script: list[int]):
        self.script = script
        self.pos = 0
        self.weight = Fraction(1)

    def _draw(self, low: int, high: int) -> int:
        width = high - low
        if width <= 0:
            raise ValueError("empty range")
        if self.pos < len(self.script):
            v = self.script[self.pos]
            self.pos += 1
            self.weight /= width
            return low + v
        raise _Branch(width)

    def integers(self, low, high=None, size=None, dtype=np.int64, endpoint=False):
        if high is None:
            low, high = 0, low
        low, high = int(low), int(high) + (1 if endpoint else 0)
        if size is None or size == ():
            return self._draw(low, high)
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        vals = [self._draw(low, high) for _ in range(math.prod(shape))]
        return np.array(vals, dtype=np.int64).reshape(shape)

    def random(self, *args, **kwargs):
        raise TypeError("continuous draws cannot be enumerated exactly")

    def bytes(self, n):
        raise TypeError("byte draws cannot be enumerated exactly")


def enumerate_outcomes(fn: Callable[[ScriptedRng], object]) -> list[tuple[Fraction, object]]:
    """All outcomes of ``fn`` with their exact probabilities."""
    out = []
    stack: list[list[int]] = [[]]
    while stack:
        script = stack.pop()
        rng = ScriptedRng(script)
        try:
            res = fn(rng)
        except _Branch as b:
            stack.extend(script + [v] for v in range(b.width - 1, -1, -1))
            continue
        out.append((rng.weight, res))
    return out


def _law(outcomes, key) -> dict:
    law: dict = {}
    for w, st in outcomes:
        k = key(st)
        if k in law:
            law[k] = (law[k][0] + w, law[k][1])
        else:
            law[k] = (w, st)
    return law


def trace_law(
    init: Callable,
    update: Callable,
    stream,
    key: Callable,
    project: Callable | None = None,
) -> dict[tuple, Fraction]:
    """Exact law of the projected trace ``(project(s_0), ..., project(s_T))``.

    ``key`` identifies states exactly (serialized bytes), ``project`` maps a
    state to what is compared (defaults to ``key``).
    """
    project = project or key
    current = {(key_state,): (w, st, (project(st),)) for key_state, (w, st) in _law(enumerate_outcomes(init), key).items()}
    kernels: dict = {}
    for x in stream:
        nxt: dict = {}
        for path, (w, st, proj) in current.items():
            kk = (path[-1], int(x))
            if kk not in kernels:
                kernels[kk] = _law(enumerate_outcomes(lambda r, st=st: update(_clone(st), x, r)), key)
            for k2, (w2, st2) in kernels[kk].items():
                nxt[path + (k2,)] = (w * w2, st2, proj + (project(st2),))
        current = nxt
    law: dict = defaultdict(Fraction)
    for w, _, proj in current.values():
        law[proj] += w
    return dict(law)


def _clone(st):
    if hasattr(st, "inner"):
        return replace(st, inner=replace(st.inner, trace=None), events=list(st.events), trace=None)
    return replace(st, trace=None)


def total_variation(a: dict, b: dict) -> Fraction:
    keys = set(a) | set(b)
    return sum((abs(a.get(k, Fraction(0)) - b.get(k, Fraction(0))) for k in keys), Fraction(0)) / 2


def normalized_ciphertext_bytes(c: crypto.Ciphertext, priv: PrivateKey) -> bytes:
    """Serialize ``(c1, c2 g^-m)``: the ciphertext with its plaintext divided out."""
    spec = c.spec
    m = crypto.dec(c, priv, bound=spec.max_bound)
    return crypto.ciphertext_bytes(crypto.Ciphertext(spec, c.c1, spec.mul(c.c2, spec.gexp(-np.asarray(m) if np.ndim(m) else -m))))


@dataclass(frozen=True)
class ExactReport:
    group: str
    stream_a: tuple
    stream_b: tuple
    fresh_enc: bool
    equal: bool
    tv: float
    normalized_equal: bool
    normalized_tv: float
    support_a: int
    support_b: int


def exact_count_trace_comparison(
    stream_a,
    stream_b,
    *,
    group: str = "test11",
    fresh_enc: bool = False,
    key_seed: int = 0,
    leaky: bool = False,
) -> ExactReport:
    """Enumerate all client randomness and compare the two trace laws exactly.

    Two comparisons are made under one fixed key pair: the serialized traces
    themselves, and the traces with every plaintext divided out of its
    ciphertext (which isolates the randomness structure of the client).
    """
    stream_a, stream_b = tuple(int(x) for x in stream_a), tuple(int(x) for x in stream_b)
    if len(stream_a) != len(stream_b):
        raise ConfigurationError("streams must have equal length")
    if len(stream_a) > 3:
        raise ConfigurationError("exhaustive enumeration is limited to T <= 3")
    spec = crypto.get_group(group)
    if spec.kind != "test":
        raise ConfigurationError("exhaustive enumeration needs a test group")
    pub, priv = crypto.keygen(spec, np.random.default_rng(key_seed))
    T = len(stream_a)

    if leaky:
        init = lambda r: leaky_count_init(pub, T, r, fresh_enc=fresh_enc, record_trace=False)
        update = leaky_count_update
        norm = lambda st: normalized_ciphertext_bytes(st.inner.c, priv) + bytes(st.events)
    else:
        init = lambda r: count_init(pub, T, r, fresh_enc=fresh_enc, record_trace=False)
        update = count_update
        norm = lambda st: normalized_ciphertext_bytes(st.c, priv)
    key = lambda st: st.snapshot()

    raw_a = trace_law(init, update, stream_a, key)
    raw_b = trace_law(init, update, stream_b, key)
    nrm_a = trace_law(init, update, stream_a, key, norm)
    nrm_b = trace_law(init, update, stream_b, key, norm)
    tv = total_variation(raw_a, raw_b)
    ntv = total_variation(nrm_a, nrm_b)
    return ExactReport(group, stream_a, stream_b, fresh_enc, tv == 0, float(tv), ntv == 0, float(ntv), len(raw_a), len(raw_b))
