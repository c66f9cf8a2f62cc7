"""Rerandomizable, additively homomorphic ElGamal with the message in the exponent.

Ciphertexts are ``(g^r, g^m h^r)`` over a prime-order subgroup of ``Z_p^*``.
Two kinds of group are supported:

* ``test`` groups have order ``q <= 2**16``.  Exponentiation and discrete
  logarithms go through precomputed tables, so every operation vectorizes over
  ``int64`` numpy arrays and distributions can be enumerated exactly.
* ``crypto`` groups use a 3072-bit safe prime (RFC 3526 group 15) and gmpy2
  modular exponentiation.  Arrays of such elements use ``object`` dtype.

Every ciphertext field may be a scalar or an array; all operations broadcast,
which is how the simulator runs thousands of clients in lock step.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from typing import Union

import gmpy2
import numpy as np

from .errors import ConfigurationError, DecodeRangeError, KeyMismatchError

Element = Union[int, np.ndarray]

DEFAULT_BOUND = 1 << 16
TABLE_DECODE_LIMIT = 1 << 20

_RFC3526_3072 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AAAC42DAD33170D04507A33"
    "A85521ABDF1CBA64ECFB850458DBEF0A8AEA71575D060C7DB3970F85A6E1E4C7"
    "ABF5AE8CDB0933D71E8C94E04A25619DCEE3D2261AD2EE6BF12FFA06D98A0864"
    "D87602733EC86A64521F2B18177B200CBBE117577A615D6C770988C0BAD946E2"
    "08E24FA074E5AB3143DB5BFCE0FD108E4B82D120A93AD2CAFFFFFFFFFFFFFFFF",
    16,
)

# Decode tables are keyed by the element reduced mod a 64-bit prime.  Plain low
# bits will not do: small powers of g = 4 are powers of two.
_KEYMOD = (1 << 64) - 59


def _out(x):
    """Collapse 0-d results to Python ints, leave arrays alone."""
    if isinstance(x, np.ndarray) and x.ndim == 0:
        return int(x)
    if isinstance(x, (np.integer, type(gmpy2.mpz(0)))):
        return int(x)
    return x


@dataclass(frozen=True)
class _Tables:
    gtable: np.ndarray  # gtable[i] = g^i
    log: np.ndarray  # log[x] = i for x = g^i, -1 outside the subgroup


@dataclass(frozen=True)
class GroupSpec:
    """A prime-order subgroup of ``Z_p^*`` generated by ``g``."""

    name: str
    p: int
    q: int
    g: int
    kind: str

    def validate(self) -> None:
        _validate_cached(self)

    @property
    def element_bytes(self) -> int:
        return (self.p.bit_length() + 7) // 8

    @property
    def max_bound(self) -> int:
        """Largest decode bound for which centered residues are unambiguous."""
        return (self.q - 1) // 2

    def _tables(self) -> _Tables:
        if self.kind != "test":
            raise ConfigurationError(f"group {self.name!r} has no lookup tables")
        return _build_tables(self)

    def _reduce(self, e):
        if np.ndim(e) == 0:
            return int(e) % self.q
        arr = np.asarray(e)
        if self.kind == "test":
            if arr.dtype == object:
                return (arr % self.q).astype(np.int64)
            return arr.astype(np.int64) % self.q
        return arr.astype(object) % self.q

    def random_exponent(self, rng: np.random.Generator, shape=()) -> Element:
        """Uniform exponent(s) in ``[0, q)``."""
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        if self.q < (1 << 62):
            if shape == ():
                return int(rng.integers(0, self.q))
            return rng.integers(0, self.q, size=shape)
        if shape == ():
            return _uniform_bigint(rng, self.q)
        n = math.prod(shape)
        out = np.empty(n, dtype=object)
        for i in range(n):
            out[i] = _uniform_bigint(rng, self.q)
        return out.reshape(shape)

    def gexp(self, e) -> Element:
        """``g ** e``."""
        e = self._reduce(e)
        if self.kind == "test":
            return _out(self._tables().gtable[e])
        if np.ndim(e) == 0:
            return int(gmpy2.powmod(self.g, e, self.p))
        return _object_pow(self.g, e, self.p)

    def exp(self, base, e) -> Element:
        """``base ** e`` for subgroup element(s) ``base``."""
        e = self._reduce(e)
        if self.kind == "test":
            t = self._tables()
            lb = t.log[np.asarray(base, dtype=np.int64)]
            return _out(t.gtable[(lb * e) % self.q])
        if np.ndim(base) == 0 and np.ndim(e) == 0:
            return int(gmpy2.powmod(base, e, self.p))
        return _object_pow(base, e, self.p)

    def mul(self, a, b) -> Element:
        return _out((a * b) % self.p) if np.ndim(a) or np.ndim(b) else (int(a) * int(b)) % self.p

    def inv(self, a) -> Element:
        return self.exp(a, self.q - 1)

    def contains(self, a) -> bool:
        """Membership test for a single element."""
        a = int(a)
        if not 0 < a < self.p:
            return False
        if self.kind == "test":
            return bool(self._tables().log[a] >= 0)
        return int(gmpy2.powmod(a, self.q, self.p)) == 1


def _uniform_bigint(rng: np.random.Generator, bound: int) -> int:
    bits = bound.bit_length()
    nbytes = (bits + 7) // 8
    excess = nbytes * 8 - bits
    while True:
        x = int.from_bytes(rng.bytes(nbytes), "big") >> excess
        if x < bound:
            return x


_POW_CACHE: dict[int, np.ufunc] = {}


def _object_pow(base, e, p: int) -> np.ndarray:
    f = _POW_CACHE.get(p)
    if f is None:
        f = np.frompyfunc(lambda b, x: int(gmpy2.powmod(b, x, p)), 2, 1)
        _POW_CACHE[p] = f
    return f(base, e)


@functools.lru_cache(maxsize=None)
def _validate_cached(spec: GroupSpec) -> None:
    if spec.kind not in ("test", "crypto"):
        raise ConfigurationError(f"unknown group kind {spec.kind!r}")
    if not gmpy2.is_prime(spec.q) or not gmpy2.is_prime(spec.p):
        raise ConfigurationError(f"group {spec.name!r}: p and q must be prime")
    if (spec.p - 1) % spec.q:
        raise ConfigurationError(f"group {spec.name!r}: q does not divide p - 1")
    if spec.kind == "test" and spec.q > (1 << 16):
        raise ConfigurationError(f"test group {spec.name!r} must have q <= 2**16")
    if spec.kind == "test" and spec.p >= (1 << 31):
        raise ConfigurationError(f"test group {spec.name!r} needs p < 2**31")
    if not 1 < spec.g < spec.p or pow(spec.g, spec.q, spec.p) != 1:
        raise ConfigurationError(f"group {spec.name!r}: generator does not have order q")


@functools.lru_cache(maxsize=None)
def _build_tables(spec: GroupSpec) -> _Tables:
    _validate_cached(spec)
    gtable = np.empty(spec.q, dtype=np.int64)
    x = 1
    for i in range(spec.q):
        gtable[i] = x
        x = x * spec.g % spec.p
    log = np.full(spec.p, -1, dtype=np.int64)
    log[gtable] = np.arange(spec.q, dtype=np.int64)
    gtable.setflags(write=False)
    log.setflags(write=False)
    return _Tables(gtable, log)


GROUPS: dict[str, GroupSpec] = {
    "test11": GroupSpec("test11", p=23, q=11, g=4, kind="test"),
    "test101": GroupSpec("test101", p=607, q=101, g=64, kind="test"),
    "test65521": GroupSpec("test65521", p=655211, q=65521, g=1024, kind="test"),
    "crypto-default": GroupSpec(
        "crypto-default", p=_RFC3526_3072, q=(_RFC3526_3072 - 1) // 2, g=4, kind="crypto"
    ),
}


def get_group(name: str) -> GroupSpec:
    try:
        spec = GROUPS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown group preset {name!r}; choose from {sorted(GROUPS)}"
        ) from None
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# Keys and ciphertexts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PublicKey:
    spec: GroupSpec
    h: int


@dataclass(frozen=True, repr=False)
class PrivateKey:
    spec: GroupSpec
    sk: int

    def __repr__(self) -> str:
        return f"PrivateKey(spec={self.spec.name!r}, sk=<hidden>)"


@dataclass(frozen=True, eq=False)
class Ciphertext:
    """One ciphertext, or an array of them when ``c1``/``c2`` are arrays.

    ``rerand_count`` is bookkeeping only; it never enters group arithmetic
    and is not serialized.
    """

    spec: GroupSpec
    c1: Element
    c2: Element
    rerand_count: Element = 0

    def __post_init__(self):
        shape = np.shape(self.c1)
        if np.shape(self.c2) != shape:
            object.__setattr__(self, "c1", np.broadcast_to(self.c1, np.broadcast_shapes(shape, np.shape(self.c2))).copy())
            object.__setattr__(self, "c2", np.broadcast_to(self.c2, np.shape(self.c1)).copy())
            shape = np.shape(self.c1)
        if shape and np.shape(self.rerand_count) != shape:
            object.__setattr__(
                self, "rerand_count", np.broadcast_to(np.asarray(self.rerand_count, dtype=np.int64), shape).copy()
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.c1)

    def __len__(self) -> int:
        return self.shape[0]

    def __getitem__(self, idx) -> "Ciphertext":
        return Ciphertext(
            self.spec,
            _out(np.asarray(self.c1)[idx]),
            _out(np.asarray(self.c2)[idx]),
            _out(np.asarray(self.rerand_count)[idx]),
        )

    def with_count(self, count) -> "Ciphertext":
        return Ciphertext(self.spec, self.c1, self.c2, count)


def _check_spec(spec: GroupSpec, other: GroupSpec) -> None:
    if spec != other:
        raise KeyMismatchError(f"group mismatch: {spec.name!r} vs {other.name!r}")


def keygen(spec: GroupSpec, rng: np.random.Generator) -> tuple[PublicKey, PrivateKey]:
    """Fresh key pair; ``sk`` uniform in ``[0, q)``."""
    spec.validate()
    sk = spec.random_exponent(rng)
    return PublicKey(spec, spec.gexp(sk)), PrivateKey(spec, sk)


def encrypt_with(m, pub: PublicKey, r) -> Ciphertext:
    """Deterministic encryption of ``m`` with explicit randomness ``r``."""
    spec = pub.spec
    c1 = spec.gexp(r)
    c2 = spec.mul(spec.gexp(m), spec.exp(pub.h, r))
    return Ciphertext(spec, c1, c2, 0)


def enc(m, pub: PublicKey, rng: np.random.Generator, shape=None) -> Ciphertext:
    """Encrypt integer(s) ``m``; negative values are centered residues mod q."""
    if shape is None:
        shape = np.shape(m)
    r = pub.spec.random_exponent(rng, tuple(shape))
    return encrypt_with(m, pub, r)


def rerandomize_with(c: Ciphertext, pub: PublicKey, s, times: int = 1) -> Ciphertext:
    """Multiply in an encryption of zero with explicit randomness ``s``.

    ``times`` is only added to the bookkeeping counter: a ``times``-fold
    rerandomization with draws ``s_1..s_t`` equals one step with their sum.
    """
    _check_spec(c.spec, pub.spec)
    spec = pub.spec
    c1 = spec.mul(c.c1, spec.gexp(s))
    c2 = spec.mul(c.c2, spec.exp(pub.h, s))
    return Ciphertext(spec, c1, c2, c.rerand_count + times)


def rerandomize(
    c: Ciphertext, pub: PublicKey, rng: np.random.Generator, times: int = 1
) -> Ciphertext:
    """Apply ``Rerandomize`` ``times`` times, drawing one exponent per application."""
    if times < 0:
        raise ValueError("times must be nonnegative")
    if times == 0:
        return c
    spec = pub.spec
    if times == 1:
        s = spec.random_exponent(rng, c.shape)
    else:
        draws = spec.random_exponent(rng, (times,) + c.shape)
        s = _out(np.sum(draws, axis=0) % spec.q) if spec.kind == "test" else _sum_object(draws, spec.q)
    return rerandomize_with(c, pub, s, times)


def _sum_object(draws: np.ndarray, q: int):
    total = draws[0]
    for d in draws[1:]:
        total = total + d
    return _out(total % q) if np.ndim(total) else int(total) % q


def add_ciphertexts(a: Ciphertext, b: Ciphertext, pub: PublicKey | None = None) -> Ciphertext:
    """Homomorphic addition of plaintexts (componentwise product)."""
    _check_spec(a.spec, b.spec)
    if pub is not None:
        _check_spec(a.spec, pub.spec)
    spec = a.spec
    count = np.maximum(a.rerand_count, b.rerand_count)
    return Ciphertext(spec, spec.mul(a.c1, b.c1), spec.mul(a.c2, b.c2), _out(count))


def scalar_mul(alpha, c: Ciphertext, pub: PublicKey | None = None) -> Ciphertext:
    """Homomorphic multiplication of the plaintext by the integer(s) ``alpha``."""
    if pub is not None:
        _check_spec(c.spec, pub.spec)
    spec = c.spec
    return Ciphertext(spec, spec.exp(c.c1, alpha), spec.exp(c.c2, alpha), c.rerand_count)


def sum_ciphertexts(c: Ciphertext, axis: int = 0) -> Ciphertext:
    """Homomorphic sum along ``axis`` of an array ciphertext."""
    spec = c.spec
    c1 = np.moveaxis(np.asarray(c.c1), axis, 0)
    c2 = np.moveaxis(np.asarray(c.c2), axis, 0)
    cnt = np.moveaxis(np.asarray(c.rerand_count), axis, 0)
    acc1, acc2 = c1[0], c2[0]
    for i in range(1, c1.shape[0]):
        acc1 = (acc1 * c1[i]) % spec.p
        acc2 = (acc2 * c2[i]) % spec.p
    return Ciphertext(spec, _out(acc1), _out(acc2), _out(cnt.max(axis=0)))


def stack(cts, axis: int = 0) -> Ciphertext:
    cts = list(cts)
    spec = cts[0].spec
    for c in cts[1:]:
        _check_spec(spec, c.spec)
    dtype = object if spec.kind == "crypto" else np.int64
    c1 = np.stack([np.asarray(c.c1, dtype=dtype) for c in cts], axis=axis)
    c2 = np.stack([np.asarray(c.c2, dtype=dtype) for c in cts], axis=axis)
    cnt = np.stack(
        [np.broadcast_to(np.asarray(c.rerand_count, dtype=np.int64), np.shape(c.c1)) for c in cts], axis=axis
    )
    return Ciphertext(spec, c1, c2, cnt)


def concatenate(cts, axis: int = 0) -> Ciphertext:
    cts = list(cts)
    spec = cts[0].spec
    dtype = object if spec.kind == "crypto" else np.int64
    c1 = np.concatenate([np.asarray(c.c1, dtype=dtype) for c in cts], axis=axis)
    c2 = np.concatenate([np.asarray(c.c2, dtype=dtype) for c in cts], axis=axis)
    cnt = np.concatenate(
        [np.broadcast_to(np.asarray(c.rerand_count, dtype=np.int64), np.shape(c.c1)) for c in cts], axis=axis
    )
    return Ciphertext(spec, c1, c2, cnt)


def select(mask, a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Elementwise ``a if mask else b``; ``mask`` broadcasts against the trailing axes."""
    _check_spec(a.spec, b.spec)
    if np.ndim(mask) == 0:
        return a if mask else b
    mask = np.asarray(mask, dtype=bool)
    return Ciphertext(
        a.spec,
        _out(np.where(mask, a.c1, b.c1)),
        _out(np.where(mask, a.c2, b.c2)),
        _out(np.where(mask, a.rerand_count, b.rerand_count)),
    )


# ---------------------------------------------------------------------------
# Decryption and bounded discrete logarithms
# ---------------------------------------------------------------------------


def _resolve_bound(spec: GroupSpec, bound: int | None) -> int:
    if bound is None:
        bound = min(DEFAULT_BOUND, spec.max_bound)
    if bound < 0:
        raise ValueError("decode bound must be nonnegative")
    if bound > spec.max_bound:
        raise DecodeRangeError(
            f"decode bound {bound} exceeds the unambiguous range {spec.max_bound} of group {spec.name!r}"
        )
    return bound


@functools.lru_cache(maxsize=8)
def _decode_table(spec: GroupSpec, bound: int) -> dict[int, int]:
    table: dict[int, int] = {}
    x = 1
    for m in range(bound + 1):
        table[x % _KEYMOD] = m
        x = x * spec.g % spec.p
    ginv = spec.inv(spec.g)
    x = ginv
    for m in range(1, bound + 1):
        table[x % _KEYMOD] = -m
        x = x * ginv % spec.p
    return table


@functools.lru_cache(maxsize=8)
def _baby_steps(spec: GroupSpec, m: int) -> dict[int, int]:
    table: dict[int, int] = {}
    x = 1
    for j in range(m):
        table.setdefault(x % _KEYMOD, j)
        x = x * spec.g % spec.p
    return table


def discrete_log_bsgs(spec: GroupSpec, target: int, bound: int) -> int:
    """Return ``e`` in ``[-bound, bound]`` with ``g^e = target`` (baby-step giant-step)."""
    n = 2 * bound + 1
    m = math.isqrt(n - 1) + 1
    baby = _baby_steps(spec, m)
    giant = spec.gexp(-m)
    y = spec.mul(int(target), spec.gexp(bound))
    for i in range(m + 1):
        j = baby.get(y % _KEYMOD)
        if j is not None:
            e = i * m + j - bound
            if -bound <= e <= bound:
                return e
        y = y * giant % spec.p
    raise DecodeRangeError(f"exponent outside [-{bound}, {bound}]")


def decode_exponent(spec: GroupSpec, target: int, bound: int) -> int:
    """Bounded discrete log: table lookup up to ``2**20``, baby-step giant-step above."""
    if bound <= TABLE_DECODE_LIMIT:
        m = _decode_table(spec, bound).get(int(target) % _KEYMOD)
        if m is None:
            raise DecodeRangeError(f"exponent outside [-{bound}, {bound}]")
        return m
    return discrete_log_bsgs(spec, target, bound)


def dec(c: Ciphertext, priv: PrivateKey, bound: int | None = None) -> Element:
    """Decrypt to integer(s) in ``[-bound, bound]``; raises :class:`DecodeRangeError` otherwise."""
    _check_spec(c.spec, priv.spec)
    spec = priv.spec
    if not 0 <= priv.sk < spec.q:
        raise KeyMismatchError("private exponent outside [0, q)")
    bound = _resolve_bound(spec, bound)
    if spec.kind == "test":
        t = spec._tables()
        l1 = t.log[np.asarray(c.c1, dtype=np.int64)]
        l2 = t.log[np.asarray(c.c2, dtype=np.int64)]
        if np.any(l1 < 0) or np.any(l2 < 0):
            raise KeyMismatchError("ciphertext component outside the group")
        e = (l2 - priv.sk * l1) % spec.q
        e = np.where(e > spec.q // 2, e - spec.q, e)
        bad = np.abs(e) > bound
        if np.any(bad):
            idx = int(np.flatnonzero(bad)[0]) if np.ndim(bad) else None
            raise DecodeRangeError(
                f"exponent outside [-{bound}, {bound}]" + (f" at flat index {idx}" if idx is not None else "")
            )
        return _out(e)
    neg = spec.q - priv.sk
    if np.ndim(c.c1) == 0:
        return decode_exponent(spec, spec.mul(c.c2, spec.exp(c.c1, neg)), bound)
    flat1 = np.asarray(c.c1, dtype=object).ravel()
    flat2 = np.asarray(c.c2, dtype=object).ravel()
    out = np.empty(flat1.size, dtype=np.int64)
    for i, (a, b) in enumerate(zip(flat1, flat2)):
        try:
            out[i] = decode_exponent(spec, spec.mul(b, spec.exp(a, neg)), bound)
        except DecodeRangeError as exc:
            raise DecodeRangeError(f"{exc} at flat index {i}") from None
    return out.reshape(np.shape(c.c1))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def ciphertext_bytes(c: Ciphertext) -> bytes:
    """Fixed-width big-endian ``c1 || c2`` per ciphertext, in C order; no counters."""
    w = c.spec.element_bytes
    if c.spec.kind == "test":
        a = np.stack([np.ravel(c.c1), np.ravel(c.c2)], axis=1).astype(">u8")
        return a.view(np.uint8).reshape(-1, 8)[:, 8 - w :].tobytes()
    parts = []
    for x1, x2 in zip(np.ravel(np.asarray(c.c1, dtype=object)), np.ravel(np.asarray(c.c2, dtype=object))):
        parts.append(int(x1).to_bytes(w, "big"))
        parts.append(int(x2).to_bytes(w, "big"))
    return b"".join(parts)


def serialize_ciphertexts(c: Ciphertext) -> bytes:
    """Length-prefixed list: ``u32 count`` then ``u16 len || c1 || c2`` per entry."""
    w = c.spec.element_bytes
    body = ciphertext_bytes(c)
    n = len(body) // (2 * w)
    out = [struct.pack(">I", n)]
    for i in range(n):
        out.append(struct.pack(">H", 2 * w))
        out.append(body[2 * w * i : 2 * w * (i + 1)])
    return b"".join(out)


def deserialize_ciphertexts(data: bytes, spec: GroupSpec) -> Ciphertext:
    """Inverse of :func:`serialize_ciphertexts`; returns a 1-D array ciphertext."""
    (n,) = struct.unpack_from(">I", data, 0)
    off = 4
    dtype = np.int64 if spec.kind == "test" else object
    c1 = np.empty(n, dtype=dtype)
    c2 = np.empty(n, dtype=dtype)
    for i in range(n):
        (ln,) = struct.unpack_from(">H", data, off)
        off += 2
        half = ln // 2
        c1[i] = int.from_bytes(data[off : off + half], "big")
        c2[i] = int.from_bytes(data[off + half : off + ln], "big")
        off += ln
    if off != len(data):
        raise ValueError("trailing bytes after ciphertext list")
    return Ciphertext(spec, c1, c2, 0)


def public_key_record(pub: PublicKey) -> dict:
    return {"group": pub.spec.name, "h": format(pub.h, "x")}


def private_key_record(priv: PrivateKey) -> dict:
    return {"group": priv.spec.name, "sk": format(priv.sk, "x")}


def public_key_from_record(rec: dict) -> PublicKey:
    spec = get_group(rec["group"])
    h = int(rec["h"], 16)
    if not spec.contains(h):
        raise KeyMismatchError("public key is not a group element")
    return PublicKey(spec, h)


def private_key_from_record(rec: dict) -> PrivateKey:
    spec = get_group(rec["group"])
    sk = int(rec["sk"], 16)
    if not 0 <= sk < spec.q:
        raise KeyMismatchError("private exponent outside [0, q)")
    return PrivateKey(spec, sk)
