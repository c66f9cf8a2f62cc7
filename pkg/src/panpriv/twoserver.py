"""Two-server CountNonZero: additive shares over a prime field, a validity proof
for ``v in {0, 1}``, encrypted per-server state and joint verification.

Validity proof.  For a shared value ``v`` the prover picks uniform masks
``u, w`` and the lines ``f(x) = v + (u - v) x`` and ``g(x) = (v - 1) + (w - v + 1) x``,
so ``f(0) g(0) = v (v - 1)``.  It additively shares the seven coefficients of
``f``, ``g`` and ``h = f g``.  Given a nonzero challenge ``r`` the servers
reconstruct ``f(r)``, ``g(r)``, ``h(r)`` and ``h(0)`` and accept iff ``h(0) = 0``,
``f(r) g(r) = h(r)`` and the constant terms of ``f`` and ``g`` are consistent
with the data shares.  ``f(r)`` and ``g(r)`` are uniform for ``r != 0`` which
is why zero is never used as a challenge.

Encrypted shares.  Field elements do not fit the bounded-decode plaintext
space, so each share is split into ``w``-bit limbs that are encrypted one by
one.  Limbs keep headroom for a few homomorphic additions, which is what
:func:`reshare_encrypted` needs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import gmpy2
import numpy as np

from . import crypto
from .clients import StateTrace, _batch_shape, _check_bits
from .crypto import Ciphertext, PrivateKey, PublicKey
from .dp import RRParams, debias_count
from .errors import ConfigurationError, MalformedReportError, ProtocolError
from .server import CountEstimate

MERSENNE61 = (1 << 61) - 1

# coefficient layout of a proof share
F0, F1, G0, G1, H0, H1, H2 = range(7)
PROOF_LEN = 7


@dataclass(frozen=True)
class FieldSpec:
    p: int = MERSENNE61

    def __post_init__(self):
        if self.p < 3 or not gmpy2.is_prime(self.p):
            raise ConfigurationError(f"field modulus {self.p} is not an odd prime")
        if self.p >= (1 << 62):
            raise ConfigurationError("field modulus must be below 2**62")

    def random(self, rng: np.random.Generator, shape=()):
        if shape == ():
            return int(rng.integers(0, self.p))
        return rng.integers(0, self.p, size=shape)

    def mul(self, a, b):
        if np.ndim(a) == 0 and np.ndim(b) == 0:
            return int(a) * int(b) % self.p
        if self.p < (1 << 31):
            return (np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)) % self.p
        prod = np.asarray(a, dtype=object) * np.asarray(b, dtype=object)
        return (prod % self.p).astype(np.int64)

    def add(self, a, b):
        if np.ndim(a) == 0 and np.ndim(b) == 0:
            return (int(a) + int(b)) % self.p
        return (np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)) % self.p

    def sub(self, a, b):
        if np.ndim(a) == 0 and np.ndim(b) == 0:
            return (int(a) - int(b)) % self.p
        return (np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64)) % self.p

    def reduce(self, a):
        if np.ndim(a) == 0:
            return int(a) % self.p
        a = np.asarray(a)
        if a.dtype == object:
            return (a % self.p).astype(np.int64)
        return a.astype(np.int64) % self.p


# ---------------------------------------------------------------------------
# Sharing and the validity proof (plaintext level)
# ---------------------------------------------------------------------------


def secret_share(v, field: FieldSpec, rng: np.random.Generator):
    """``s1`` uniform, ``s2 = v - s1``."""
    s1 = field.random(rng, np.shape(v))
    return s1, field.sub(v, s1)


def proof_coefficients(v, u, w, field: FieldSpec) -> list:
    """Coefficients ``(f0, f1, g0, g1, h0, h1, h2)`` for value ``v`` and masks ``u``, ``w``."""
    f0 = field.reduce(v)
    f1 = field.sub(u, f0)
    g0 = field.sub(f0, 1)
    g1 = field.sub(w, g0)
    h0 = field.mul(f0, g0)
    h1 = field.add(field.mul(f0, g1), field.mul(f1, g0))
    h2 = field.mul(f1, g1)
    return [f0, f1, g0, g1, h0, h1, h2]


def proof_from_masks(v, u, w, pi1, field: FieldSpec):
    """Deterministic proof shares: ``pi1`` is server 1's share, server 2 gets the rest."""
    coeffs = proof_coefficients(v, u, w, field)
    pi1 = [field.reduce(pi1[i]) for i in range(PROOF_LEN)]
    pi2 = [field.sub(coeffs[i], pi1[i]) for i in range(PROOF_LEN)]
    return _pack(pi1), _pack(pi2)


def _pack(parts):
    if all(np.ndim(x) == 0 for x in parts):
        return np.array([int(x) for x in parts], dtype=np.int64)
    shape = np.broadcast_shapes(*[np.shape(x) for x in parts])
    return np.stack([np.broadcast_to(np.asarray(x, dtype=np.int64), shape) for x in parts])


def make_validity_proof(v, s1, s2, rng: np.random.Generator, field: FieldSpec = FieldSpec()):
    """Proof shares ``(pi1, pi2)``, each of shape ``(7, *batch)``, that ``s1 + s2`` is a bit.

    ``s1`` and ``s2`` are accepted for interface symmetry; consistency with them
    is enforced at verification time.
    """
    shape = np.shape(v)
    u = field.random(rng, shape)
    w = field.random(rng, shape)
    pi1 = field.random(rng, (PROOF_LEN,) + shape)
    return proof_from_masks(v, u, w, pi1, field)


@dataclass(frozen=True)
class ShareBundle:
    s1: object
    s2: object
    pi1: np.ndarray
    pi2: np.ndarray


def make_bundle(v, field: FieldSpec, rng: np.random.Generator) -> ShareBundle:
    s1, s2 = secret_share(v, field, rng)
    pi1, pi2 = make_validity_proof(v, s1, s2, rng, field)
    return ShareBundle(s1, s2, pi1, pi2)


@dataclass(frozen=True)
class ServerEvaluation:
    """What one server publishes to the other for a challenge ``r``."""

    f: object
    g: object
    h: object
    h0: object
    d: object  # f0 share minus data share
    e: object  # g0 share minus data share


def server_evaluate(s, pi, r, field: FieldSpec) -> ServerEvaluation:
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape[0] != PROOF_LEN:
        raise MalformedReportError(f"proof share has {pi.shape[0]} coefficients, expected {PROOF_LEN}")
    c = [_out(pi[i]) for i in range(PROOF_LEN)]
    r2 = field.mul(r, r)
    f = field.add(c[F0], field.mul(c[F1], r))
    g = field.add(c[G0], field.mul(c[G1], r))
    h = field.add(field.add(c[H0], field.mul(c[H1], r)), field.mul(c[H2], r2))
    return ServerEvaluation(f, g, h, c[H0], field.sub(c[F0], s), field.sub(c[G0], s))


def _out(x):
    return int(x) if np.ndim(x) == 0 else x


def combine_evaluations(e1: ServerEvaluation, e2: ServerEvaluation, field: FieldSpec):
    """Accept iff ``h(0) = 0``, ``f(r) g(r) = h(r)``, ``f(0) = s1 + s2`` and ``g(0) = f(0) - 1``."""
    f = field.add(e1.f, e2.f)
    g = field.add(e1.g, e2.g)
    h = field.add(e1.h, e2.h)
    h0 = field.add(e1.h0, e2.h0)
    d = field.add(e1.d, e2.d)
    e = field.add(e1.e, e2.e)
    ok = (
        (np.asarray(h0) == 0)
        & (np.asarray(field.mul(f, g)) == np.asarray(h))
        & (np.asarray(d) == 0)
        & (np.asarray(e) == field.p - 1)
    )
    return bool(ok) if ok.ndim == 0 else ok


def verify_shares(s1, pi1, s2, pi2, r, field: FieldSpec = FieldSpec()):
    """Joint verification of a bundle (or a batch of bundles) at challenge ``r``."""
    pi1 = np.asarray(pi1)
    pi2 = np.asarray(pi2)
    if pi1.shape != pi2.shape or pi1.shape[0] != PROOF_LEN:
        raise MalformedReportError(f"inconsistent proof share shapes {pi1.shape} and {pi2.shape}")
    if np.any(np.asarray(r) % field.p == 0):
        raise MalformedReportError("challenge must be nonzero")
    return combine_evaluations(
        server_evaluate(s1, pi1, r, field), server_evaluate(s2, pi2, r, field), field
    )


def server_view(v, u, w, s1, pi1_rand, r, field: FieldSpec) -> tuple:
    """Everything server 1 sees when verifying an honestly built bundle.

    ``(s1, pi1, f(r), g(r), h(r), h(0), d2, e2)`` where ``d2``/``e2`` are the
    consistency values published by server 2.
    """
    s2 = field.sub(v, s1)
    pi1, pi2 = proof_from_masks(v, u, w, pi1_rand, field)
    e1 = server_evaluate(s1, pi1, r, field)
    e2 = server_evaluate(s2, pi2, r, field)
    f = field.add(e1.f, e2.f)
    g = field.add(e1.g, e2.g)
    h = field.add(e1.h, e2.h)
    h0 = field.add(e1.h0, e2.h0)
    return (s1, tuple(int(x) for x in np.ravel(pi1)) if np.ndim(u) == 0 else pi1, f, g, h, h0, e2.d, e2.e)


# ---------------------------------------------------------------------------
# Limb encoding of shares
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShareCodec:
    """Splits field elements into ``width``-bit limbs, each encrypted separately."""

    group: crypto.GroupSpec
    field: FieldSpec

    @property
    def width(self) -> int:
        if self.group.kind == "crypto":
            return 12
        return max(1, min(16, self.group.q.bit_length() - 4))

    @property
    def bound(self) -> int:
        if self.group.kind == "crypto":
            return crypto.DEFAULT_BOUND
        return self.group.max_bound

    @property
    def limbs(self) -> int:
        return math.ceil(self.field.p.bit_length() / self.width)

    def encode(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.int64)
        mask = (1 << self.width) - 1
        return np.stack([(v >> (self.width * j)) & mask for j in range(self.limbs)])

    def decode(self, limbs) -> object:
        limbs = np.asarray(limbs)
        total = np.zeros(limbs.shape[1:], dtype=object)
        for j in range(limbs.shape[0]):
            total = total + limbs[j].astype(object) * (1 << (self.width * j))
        return self.field.reduce(total)


# ---------------------------------------------------------------------------
# Client state machine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoServerKeys:
    pub1: PublicKey
    pub2: PublicKey


@dataclass
class TwoServerClientState:
    """Encrypted shares ``c1``/``c2`` (shape ``(L, *batch)``) and proofs ``pr1``/``pr2`` (``(L, 7, *batch)``)."""

    keys: TwoServerKeys
    field: FieldSpec
    T: int
    c1: Ciphertext
    pr1: Ciphertext
    c2: Ciphertext
    pr2: Ciphertext
    step: int = 0
    fresh_enc: bool = False
    trace: StateTrace | None = None

    @property
    def codec(self) -> ShareCodec:
        return ShareCodec(self.keys.pub1.spec, self.field)

    def blobs(self) -> list[bytes]:
        return [crypto.ciphertext_bytes(x) for x in (self.c1, self.pr1, self.c2, self.pr2)]

    def snapshot(self) -> bytes:
        return b"".join(self.blobs())


@dataclass(frozen=True)
class TwoServerReport:
    c1: Ciphertext
    pr1: Ciphertext
    c2: Ciphertext
    pr2: Ciphertext

    def serialize(self) -> bytes:
        import struct

        out = []
        for part in (self.c1, self.pr1, self.c2, self.pr2):
            blob = crypto.serialize_ciphertexts(_flatten(part))
            out.append(struct.pack(">I", len(blob)) + blob)
        return b"".join(out)


def _flatten(c: Ciphertext) -> Ciphertext:
    return Ciphertext(c.spec, np.ravel(c.c1), np.ravel(c.c2), np.ravel(c.rerand_count))


def _encrypt_bundle(bundle: ShareBundle, state: TwoServerClientState, times: int, rng):
    codec = state.codec
    parts = []
    for value, pub in ((bundle.s1, state.keys.pub1), (bundle.pi1, state.keys.pub1),
                       (bundle.s2, state.keys.pub2), (bundle.pi2, state.keys.pub2)):
        limbs = codec.encode(value)
        c = crypto.enc(limbs, pub, rng)
        parts.append(c.with_count(times) if state.fresh_enc else crypto.rerandomize(c, pub, rng, times=times))
    return parts


def _rerandomize_all(parts, keys: TwoServerKeys, rng):
    pubs = (keys.pub1, keys.pub1, keys.pub2, keys.pub2)
    return [crypto.rerandomize(c, pub, rng) for c, pub in zip(parts, pubs)]


def _select_all(mask, a, b):
    out = []
    for x, y in zip(a, b):
        m = mask if np.ndim(mask) == 0 else np.broadcast_to(mask, x.shape)
        out.append(crypto.select(m, x, y))
    return out


def ts_keygen(group: crypto.GroupSpec, rng) -> tuple[TwoServerKeys, PrivateKey, PrivateKey]:
    pub1, priv1 = crypto.keygen(group, rng)
    pub2, priv2 = crypto.keygen(group, rng)
    return TwoServerKeys(pub1, pub2), priv1, priv2


def ts_client_init(
    keys: TwoServerKeys,
    T: int,
    rng: np.random.Generator,
    *,
    field: FieldSpec = FieldSpec(),
    batch=None,
    fresh_enc: bool | None = None,
    record_trace: bool = True,
) -> TwoServerClientState:
    if keys.pub1.spec != keys.pub2.spec:
        raise ConfigurationError("both servers must use the same group preset")
    if T < 1:
        raise ProtocolError(f"horizon T must be at least 1, got {T}")
    shape = _batch_shape(batch)
    fresh = keys.pub1.spec.kind == "crypto" if fresh_enc is None else bool(fresh_enc)
    state = TwoServerClientState(keys, field, T, None, None, None, None, 0, fresh,
                                 StateTrace() if record_trace else None)
    bundle = make_bundle(np.zeros(shape, dtype=np.int64) if shape else 0, field, rng)
    state.c1, state.pr1, state.c2, state.pr2 = [c.with_count(0) for c in _encrypt_bundle(bundle, state, 0, rng)]
    if state.trace is not None:
        state.trace.append(0, state.snapshot())
    return state


def _parts(state):
    return [state.c1, state.pr1, state.c2, state.pr2]


def ts_client_update(state: TwoServerClientState, x, rng: np.random.Generator) -> TwoServerClientState:
    if state.step >= state.T:
        raise ProtocolError(f"update past horizon T={state.T}")
    _check_bits(x)
    t = state.step + 1
    batch = state.c1.shape[1:]

    def one():
        bundle = make_bundle(np.ones(batch, dtype=np.int64) if batch else 1, state.field, rng)
        return _encrypt_bundle(bundle, state, t, rng)

    def zero():
        return _rerandomize_all(_parts(state), state.keys, rng)

    if np.ndim(x) == 0:
        new = one() if int(x) else zero()
    else:
        xb = np.asarray(x).astype(bool)
        new = one() if xb.all() else zero() if not xb.any() else _select_all(xb, one(), zero())
    state.c1, state.pr1, state.c2, state.pr2 = new
    state.step = t
    if state.trace is not None:
        state.trace.append(t, state.snapshot())
    return state


def ts_client_report(state: TwoServerClientState, rr: RRParams, rng: np.random.Generator) -> TwoServerReport:
    """Encrypted RR on the shared bit, then one final rerandomization of everything."""
    if state.step != state.T:
        raise ProtocolError(f"report requested at step {state.step}, expected {state.T}")
    batch = state.c1.shape[1:]
    keep = rng.random(batch) < rr.keep_prob
    bits = rng.integers(0, 2, size=batch)
    if not batch:
        keep, bits = bool(keep), int(bits)
    parts = _parts(state)
    if not np.all(keep):
        fresh = _encrypt_bundle(make_bundle(bits, state.field, rng), state, state.T, rng)
        parts = _select_all(keep, parts, fresh)
    return TwoServerReport(*_rerandomize_all(parts, state.keys, rng))


def run_ts_client(keys, stream, rr, rng, *, field=FieldSpec(), fresh_enc=None, record_trace=True):
    stream = np.asarray(stream)
    batch = stream.shape[1:] or None
    state = ts_client_init(keys, stream.shape[0], rng, field=field, batch=batch,
                           fresh_enc=fresh_enc, record_trace=record_trace)
    for x in stream:
        ts_client_update(state, x, rng)
    return state, ts_client_report(state, rr, rng)


# ---------------------------------------------------------------------------
# Servers
# ---------------------------------------------------------------------------


def decrypt_share_side(c: Ciphertext, pr: Ciphertext, priv: PrivateKey, codec: ShareCodec):
    """One server's decryption: share values ``(*batch)`` and proof shares ``(7, *batch)``."""
    s = codec.decode(crypto.dec(c, priv, bound=codec.bound))
    limbs = np.asarray(crypto.dec(pr, priv, bound=codec.bound))
    pi = np.stack([codec.decode(limbs[:, i]) for i in range(PROOF_LEN)])
    return s, pi


def draw_challenges(rng: np.random.Generator, field: FieldSpec, size) -> np.ndarray:
    """Nonzero challenges from the servers' shared RNG."""
    return rng.integers(1, field.p, size=size)


@dataclass(frozen=True)
class TwoServerResult:
    estimate: CountEstimate
    accepted: int
    rejected: int
    transcript: list[dict] = field(default_factory=list)

    def transcript_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.transcript)


def _combine_reports(reports) -> TwoServerReport:
    if isinstance(reports, TwoServerReport):
        return reports
    reports = list(reports)
    if not reports:
        raise MalformedReportError("no reports supplied")

    def cat(attr):
        items = [getattr(r, attr) for r in reports]
        return crypto.concatenate([_as_batched(c) for c in items], axis=-1)

    return TwoServerReport(cat("c1"), cat("pr1"), cat("c2"), cat("pr2"))


def _as_batched(c: Ciphertext) -> Ciphertext:
    return Ciphertext(c.spec, np.asarray(c.c1)[..., None], np.asarray(c.c2)[..., None],
                      np.asarray(c.rerand_count)[..., None])


def ts_aggregate(
    reports,
    priv1: PrivateKey,
    priv2: PrivateKey,
    rr: RRParams,
    *,
    field: FieldSpec = FieldSpec(),
    challenge_rng: np.random.Generator | None = None,
    true_value: int | None = None,
) -> TwoServerResult:
    """Verify every bundle, drop rejects, sum shares per server and de-bias.

    ``reports`` is a batched :class:`TwoServerReport` (last axis = clients) or
    a list of single-client reports.
    """
    rep = _combine_reports(reports)
    n = rep.c1.shape[-1]
    if field.p <= 2 * n:
        raise ConfigurationError(f"field modulus {field.p} too small for n={n} clients (need p > 2n)")
    codec = ShareCodec(priv1.spec, field)
    s1, pi1 = decrypt_share_side(rep.c1, rep.pr1, priv1, codec)
    s2, pi2 = decrypt_share_side(rep.c2, rep.pr2, priv2, codec)
    rng = challenge_rng if challenge_rng is not None else np.random.default_rng(0)
    r = draw_challenges(rng, field, n)
    ok = np.asarray(verify_shares(s1, pi1, s2, pi2, r, field), dtype=bool)
    total = field.add(int(np.asarray(s1)[ok].astype(object).sum()) % field.p,
                      int(np.asarray(s2)[ok].astype(object).sum()) % field.p)
    accepted = int(ok.sum())
    count = int(total)
    if count > accepted:
        raise MalformedReportError("accepted share sum exceeds number of accepted clients")
    transcript = [{"client": i, "accept": bool(ok[i]), "challenge": int(r[i])} for i in range(n)]
    est = CountEstimate(debias_count(float(count), accepted, rr), accepted, rr.eps0, true_value, n - accepted)
    return TwoServerResult(est, accepted, n - accepted, transcript)


def reshare_encrypted(
    c1: Ciphertext,
    c2: Ciphertext,
    keys: TwoServerKeys,
    rng: np.random.Generator,
    *,
    field: FieldSpec = FieldSpec(),
    offset=None,
) -> tuple[Ciphertext, Ciphertext]:
    """Re-share under encryption: add ``r`` to server 1's share and ``-r`` to server 2's.

    ``c1`` and ``c2`` are limb-encrypted shares of shape ``(L, *batch)``.
    ``-r`` is encoded as ``p - r`` so every limb stays nonnegative.
    """
    codec = ShareCodec(keys.pub1.spec, field)
    batch = c1.shape[1:]
    r = field.random(rng, batch) if offset is None else offset
    neg = field.sub(0, r)
    d1 = crypto.enc(codec.encode(r), keys.pub1, rng)
    d2 = crypto.enc(codec.encode(neg), keys.pub2, rng)
    return crypto.add_ciphertexts(c1, d1), crypto.add_ciphertexts(c2, d2)
