"""Bit encryption built from any 0-locally pan-private CountNonZero pipeline.

Key generation initializes ``n`` clients; those initial states are the public
key and the server's decryption material is the private key.  Encrypting a
bit runs one step of every client on that bit, rerandomizing runs one more
step on input 0, and decryption finishes the run, collects reports and
thresholds the CountNonZero estimate at ``n/2``.

The module only talks to the pipeline through the :class:`Pipeline` protocol,
so states, reports and keys stay opaque here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Protocol, Sequence

import numpy as np

from .errors import ParameterError, ReductionError


class Pipeline(Protocol):
    def keygen(self, rng) -> tuple[Any, Any]: ...
    def initialize(self, server_public: Any, T: int, rng) -> Any: ...
    def update(self, state: Any, x: int, rng) -> Any: ...
    def report(self, state: Any, rng) -> Any: ...
    def estimate(self, reports: Sequence[Any], server_private: Any) -> float: ...
    def clone_state(self, state: Any) -> Any: ...
    def state_bytes(self, state: Any) -> bytes: ...


@dataclass(frozen=True)
class ReducedPublicKey:
    n: int
    T: int
    states: tuple
    pipeline: Pipeline


@dataclass(frozen=True, repr=False)
class ReducedPrivateKey:
    n: int
    T: int
    server_private: Any
    pipeline: Pipeline

    def __repr__(self) -> str:
        return f"ReducedPrivateKey(n={self.n}, T={self.T})"


@dataclass(frozen=True)
class ReducedKeys:
    public: ReducedPublicKey
    private: ReducedPrivateKey


@dataclass(frozen=True)
class ReducedCiphertext:
    t: int
    states: tuple

    def to_bytes(self, pipeline: Pipeline) -> bytes:
        return b"".join(pipeline.state_bytes(s) for s in self.states)


def reduced_keygen(n: int, T: int, pipeline: Pipeline, rng: np.random.Generator) -> ReducedKeys:
    if n < 1:
        raise ParameterError(f"n must be at least 1, got {n}")
    if T < 2:
        raise ParameterError(f"T must be at least 2 to allow a rerandomization, got {T}")
    server_public, server_private = pipeline.keygen(rng)
    states = tuple(pipeline.initialize(server_public, T, rng) for _ in range(n))
    return ReducedKeys(
        ReducedPublicKey(n, T, states, pipeline),
        ReducedPrivateKey(n, T, server_private, pipeline),
    )


def _advance(states, x: int, pipeline: Pipeline, rng) -> tuple:
    return tuple(pipeline.update(pipeline.clone_state(s), x, rng) for s in states)


def reduced_enc(b: int, pub: ReducedPublicKey, rng: np.random.Generator) -> ReducedCiphertext:
    if b not in (0, 1):
        raise ParameterError(f"plaintext must be a bit, got {b}")
    return ReducedCiphertext(1, _advance(pub.states, b, pub.pipeline, rng))


def reduced_rerandomize(c: ReducedCiphertext, pub: ReducedPublicKey, rng: np.random.Generator) -> ReducedCiphertext:
    """One zero-step on every client; ciphertexts already at step ``T`` are rejected."""
    _check(c, pub.n, pub.T)
    if c.t >= pub.T:
        raise ReductionError(f"ciphertext at step {c.t} cannot be rerandomized (T={pub.T})")
    return ReducedCiphertext(c.t + 1, _advance(c.states, 0, pub.pipeline, rng))


def reduced_dec(c: ReducedCiphertext, priv: ReducedPrivateKey, rng: np.random.Generator) -> int:
    """Finish the run with zeros, report, estimate, and threshold at ``n/2``."""
    _check(c, priv.n, priv.T)
    pipeline = priv.pipeline
    states = c.states
    for _ in range(c.t, priv.T):
        states = _advance(states, 0, pipeline, rng)
    reports = [pipeline.report(pipeline.clone_state(s), rng) for s in states]
    return int(pipeline.estimate(reports, priv.server_private) >= priv.n / 2)


def _check(c: ReducedCiphertext, n: int, T: int) -> None:
    if len(c.states) != n:
        raise ReductionError(f"ciphertext holds {len(c.states)} states, expected {n}")
    if not 1 <= c.t <= T:
        raise ReductionError(f"ciphertext step {c.t} outside [1, {T}]")
