from __future__ import annotations

import ast
import inspect
import math

import numpy as np
import pytest

from panpriv import crypto, reduction
from panpriv.errors import ParameterError, ReductionError
from panpriv.reduction import (
    ReducedCiphertext,
    reduced_dec,
    reduced_enc,
    reduced_keygen,
    reduced_rerandomize,
)
from panpriv.server import CountPipeline


@pytest.fixture(scope="module")
def keys():
    return reduced_keygen(200, 10, CountPipeline(eps0=math.inf), np.random.default_rng(0))


@pytest.mark.parametrize("b", [0, 1])
def test_round_trip(keys, b):
    rng = np.random.default_rng(1 + b)
    c = reduced_enc(b, keys.public, rng)
    assert c.t == 1 and len(c.states) == 200
    assert reduced_dec(c, keys.private, rng) == b
    assert reduced_dec(reduced_rerandomize(c, keys.public, rng), keys.private, rng) == b


@pytest.mark.parametrize("b", [0, 1])
def test_enc_states_hold_the_bit(keys, b):
    c = reduced_enc(b, keys.public, np.random.default_rng(3))
    vals = {crypto.dec(s.c, keys.private.server_private) for s in c.states}
    assert vals == {b}


def test_enc_structure_independent_of_bit(keys):
    rng = np.random.default_rng(4)
    pipe = keys.public.pipeline
    a = reduced_enc(0, keys.public, rng).to_bytes(pipe)
    b = reduced_enc(1, keys.public, rng).to_bytes(pipe)
    assert len(a) == len(b) and a != b


def test_rerandomize_boundary(keys):
    rng = np.random.default_rng(5)
    c = reduced_enc(1, keys.public, rng)
    for _ in range(keys.public.T - 1):
        c = reduced_rerandomize(c, keys.public, rng)
    assert c.t == keys.public.T
    with pytest.raises(ReductionError):
        reduced_rerandomize(c, keys.public, rng)
    assert reduced_dec(c, keys.private, rng) == 1


def test_random_rerandomization_depths(keys):
    rng = np.random.default_rng(6)
    for _ in range(20):
        b = int(rng.integers(0, 2))
        c = reduced_enc(b, keys.public, rng)
        for _ in range(int(rng.integers(0, keys.public.T))):
            c = reduced_rerandomize(c, keys.public, rng)
        assert reduced_dec(c, keys.private, rng) == b


def test_noisy_pipeline_round_trip():
    rng = np.random.default_rng(7)
    keys = reduced_keygen(200, 10, CountPipeline(eps0=1.0), rng)
    errors = 0
    for i in range(20):
        b = i % 2
        errors += reduced_dec(reduced_enc(b, keys.public, rng), keys.private, rng) != b
    assert errors == 0


def test_independent_keygens():
    pipe = CountPipeline()
    a = reduced_keygen(5, 3, pipe, np.random.default_rng(8))
    b = reduced_keygen(5, 3, pipe, np.random.default_rng(9))
    assert a.public.states[0] is not b.public.states[0]
    assert a.private.server_private.sk != b.private.server_private.sk
    # initial states are not mutated by encryption
    before = [pipe.state_bytes(s) for s in a.public.states]
    reduced_enc(1, a.public, np.random.default_rng(10))
    assert [pipe.state_bytes(s) for s in a.public.states] == before
    assert "sk" not in repr(a.private)


def test_parameter_and_ciphertext_checks(keys):
    with pytest.raises(ParameterError):
        reduced_keygen(10, 1, CountPipeline(), np.random.default_rng(0))
    with pytest.raises(ParameterError):
        reduced_enc(2, keys.public, np.random.default_rng(0))
    bad = ReducedCiphertext(1, keys.public.states[:3])
    with pytest.raises(ReductionError):
        reduced_dec(bad, keys.private, np.random.default_rng(0))


def test_module_is_generic():
    tree = ast.parse(inspect.getsource(reduction))
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module or "")
            imported.update(a.name for a in node.names)
        elif isinstance(node, ast.Import):
            imported.update(a.name for a in node.names)
    assert not any("crypto" in name or "clients" in name for name in imported)
