from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from panpriv import crypto
from panpriv.clients import run_count_client
from panpriv.dp import RRParams
from panpriv.errors import ConfigurationError, MalformedReportError, ProtocolError
from panpriv.server import estimate_count
from panpriv.twoserver import (
    H1,
    MERSENNE61,
    FieldSpec,
    ShareCodec,
    TwoServerReport,
    decrypt_share_side,
    make_bundle,
    make_validity_proof,
    proof_from_masks,
    reshare_encrypted,
    run_ts_client,
    secret_share,
    server_view,
    ts_aggregate,
    ts_client_init,
    ts_client_report,
    ts_client_update,
    ts_keygen,
    verify_shares,
)

F101 = FieldSpec(101)
BIG = RRParams(1e9)
ALL_R = np.arange(1, 101)


@pytest.fixture(scope="module")
def tskeys():
    return ts_keygen(crypto.get_group("test65521"), np.random.default_rng(0))


def test_field_rejects_composite():
    with pytest.raises(ConfigurationError):
        FieldSpec(100)
    assert FieldSpec().p == MERSENNE61


def test_secret_share_examples():
    rng = np.random.default_rng(1)
    s1, s2 = secret_share(0, F101, rng)
    assert (s1 + s2) % 101 == 0
    a = secret_share(1, FieldSpec(), np.random.default_rng(5))
    b = secret_share(1, FieldSpec(), np.random.default_rng(5))
    assert a == b and (a[0] + a[1]) % MERSENNE61 == 1


def test_secret_share_marginal_uniform():
    rng = np.random.default_rng(2)
    s1, s2 = secret_share(np.ones(101 * 200, dtype=np.int64), F101, rng)
    assert np.all((s1 + s2) % 101 == 1)
    counts = np.bincount(s1, minlength=101)
    assert stats.chisquare(counts).pvalue > 0.001


def _accepting(v, u, w, s1, pi1_rand, field=F101, tamper=None):
    pi1, pi2 = proof_from_masks(v, u, w, pi1_rand, field)
    if tamper is not None:
        pi1 = pi1.copy()
        pi1[tamper] = (pi1[tamper] + 1) % field.p
    s2 = field.sub(v, s1)
    return np.asarray(verify_shares(s1, pi1[:, None], s2, pi2[:, None], ALL_R, field)).sum()


def test_completeness_exhaustive():
    # every (v, u, w) with v a bit, verified at every nonzero challenge
    uu, ww = np.meshgrid(np.arange(101), np.arange(101), indexing="ij")
    u, w = uu.ravel(), ww.ravel()
    pi1_rand = [3, 14, 15, 92, 65, 35, 89]
    for v in (0, 1):
        pi1, pi2 = proof_from_masks(v, u, w, pi1_rand, F101)
        pi1 = np.broadcast_to(pi1[:, None], pi2.shape)
        s1 = 42
        s2 = F101.sub(v, s1)
        for r in ALL_R:
            assert np.all(verify_shares(s1, pi1, s2, pi2, int(r), F101))


def test_soundness_invalid_value():
    rng = np.random.default_rng(3)
    for v in (2, 3, 5, 100):
        for _ in range(5):
            u, w, s1 = (int(x) for x in rng.integers(0, 101, 3))
            assert _accepting(v, u, w, s1, rng.integers(0, 101, 7)) == 0


def test_soundness_tampered_h():
    rng = np.random.default_rng(4)
    for v in (0, 1):
        for coeff in (H1, H1 + 1):
            for _ in range(20):
                u, w, s1 = (int(x) for x in rng.integers(0, 101, 3))
                assert _accepting(v, u, w, s1, rng.integers(0, 101, 7), tamper=coeff) <= 2


def test_soundness_cheating_prover_bound():
    # a prover that forces h(0)=0 for v=5 but cannot make h equal f*g
    rng = np.random.default_rng(5)
    field = F101
    worst = 0
    for _ in range(200):
        v, u, w = 5, *(int(x) for x in rng.integers(0, 101, 2))
        f = [v, (u - v) % 101]
        g = [v - 1, (w - v + 1) % 101]
        h = [0, int(rng.integers(0, 101)), int(rng.integers(0, 101))]
        coeffs = np.array(f + g + h)
        pi1 = rng.integers(0, 101, 7)
        pi2 = (coeffs - pi1) % 101
        s1 = int(rng.integers(0, 101))
        acc = np.asarray(verify_shares(s1, pi1[:, None], (v - s1) % 101, pi2[:, None], ALL_R, field)).sum()
        worst = max(worst, int(acc))
    assert worst / 100 <= 2 / (101 - 1)


def test_share_mismatch_rejected():
    rng = np.random.default_rng(6)
    b = make_bundle(1, F101, rng)
    assert verify_shares(b.s1, b.pi1, b.s2, b.pi2, 7, F101)
    assert not verify_shares(b.s1, b.pi1, (b.s2 + 1) % 101, b.pi2, 7, F101)
    with pytest.raises(MalformedReportError):
        verify_shares(b.s1, b.pi1[:5], b.s2, b.pi2, 7, F101)
    with pytest.raises(MalformedReportError):
        verify_shares(b.s1, b.pi1, b.s2, b.pi2, 0, F101)


def test_zero_knowledge_exhaustive():
    # server 1's view has the same law for v=0 and v=1 once masks are enumerated
    uu, ww = np.meshgrid(np.arange(101), np.arange(101), indexing="ij")
    u, w = uu.ravel(), ww.ravel()
    rng = np.random.default_rng(7)
    for _ in range(3):
        s1 = int(rng.integers(0, 101))
        pi1_rand = [int(x) for x in rng.integers(0, 101, 7)]
        for r in (1, 2, 50, 100):
            views = []
            for v in (0, 1):
                _, pi1, *rest = server_view(v, u, w, s1, pi1_rand, r, F101)
                cols = [np.broadcast_to(x, u.shape).tolist() for x in rest]
                views.append((Counter(zip(*cols)), np.asarray(pi1).tobytes()))
            assert views[0] == views[1]


def test_zero_knowledge_fails_at_zero_challenge():
    u = np.arange(101)
    f0 = server_view(0, u, u, 0, [0] * 7, 0, F101)[2]
    f1 = server_view(1, u, u, 0, [0] * 7, 0, F101)[2]
    assert set(np.asarray(f0).tolist()) != set(np.asarray(f1).tolist())


def test_make_validity_proof_batch():
    rng = np.random.default_rng(8)
    v = np.array([0, 1, 1, 0])
    s1, s2 = secret_share(v, FieldSpec(), rng)
    pi1, pi2 = make_validity_proof(v, s1, s2, rng)
    assert pi1.shape == (7, 4)
    assert np.all(verify_shares(s1, pi1, s2, pi2, rng.integers(1, MERSENNE61, 4)))


def test_codec_roundtrip():
    for name in ("test65521", "crypto-default"):
        codec = ShareCodec(crypto.get_group(name), FieldSpec())
        vals = np.array([0, 1, MERSENNE61 - 1, 123456789])
        assert np.array_equal(np.asarray(codec.decode(codec.encode(vals)), dtype=np.int64), vals)
        assert codec.limbs * codec.width >= 61


def _server_sums(state, priv1, priv2):
    codec = state.codec
    s1, pi1 = decrypt_share_side(state.c1, state.pr1, priv1, codec)
    s2, pi2 = decrypt_share_side(state.c2, state.pr2, priv2, codec)
    return state.field.add(s1, s2), (s1, pi1, s2, pi2)


def test_client_all_zero_every_step(tskeys):
    keys, priv1, priv2 = tskeys
    rng = np.random.default_rng(9)
    st = ts_client_init(keys, 4, rng)
    assert int(_server_sums(st, priv1, priv2)[0]) == 0
    for _ in range(4):
        ts_client_update(st, 0, rng)
        assert int(_server_sums(st, priv1, priv2)[0]) == 0


@pytest.mark.parametrize("fresh", [False, True])
def test_client_event_at_two(tskeys, fresh):
    keys, priv1, priv2 = tskeys
    rng = np.random.default_rng(10)
    st, rep = run_ts_client(keys, [0, 1, 0, 0, 0], BIG, rng, fresh_enc=fresh)
    total, (s1, pi1, s2, pi2) = _server_sums(st, priv1, priv2)
    assert int(total) == 1
    assert verify_shares(s1, pi1, s2, pi2, 12345)
    assert st.c1.rerand_count.tolist() == [5] * st.codec.limbs


def test_client_snapshot_structure(tskeys):
    keys, _, _ = tskeys
    rng = np.random.default_rng(11)
    a, _ = run_ts_client(keys, [0, 0, 0], BIG, rng)
    b, _ = run_ts_client(keys, [1, 0, 1], BIG, rng)
    sizes_a = a.trace.sizes()
    assert sizes_a == b.trace.sizes() and len(sizes_a) == 4
    assert [len(x) for x in a.blobs()] == [len(x) for x in b.blobs()] and len(a.blobs()) == 4


def test_client_horizon(tskeys):
    keys, _, _ = tskeys
    rng = np.random.default_rng(12)
    st = ts_client_init(keys, 1, rng)
    with pytest.raises(ProtocolError):
        ts_client_report(st, BIG, rng)
    ts_client_update(st, 1, rng)
    with pytest.raises(ProtocolError):
        ts_client_update(st, 0, rng)


def test_aggregate_honest_exact(tskeys):
    keys, priv1, priv2 = tskeys
    rng = np.random.default_rng(13)
    X = (rng.random((6, 300)) < 0.1).astype(int)
    _, rep = run_ts_client(keys, X, BIG, rng, record_trace=False)
    res = ts_aggregate(rep, priv1, priv2, BIG, challenge_rng=np.random.default_rng(1))
    assert res.estimate.estimate == pytest.approx(X.any(axis=0).sum())
    assert (res.accepted, res.rejected) == (300, 0)
    assert res.transcript_jsonl().count("\n") == 300


def _malicious_report(keys, value, field, rng):
    codec = ShareCodec(keys.pub1.spec, field)
    b = make_bundle(value % field.p, field, rng)
    parts = [crypto.enc(codec.encode(x), pub, rng)
             for x, pub in ((b.s1, keys.pub1), (b.pi1, keys.pub1), (b.s2, keys.pub2), (b.pi2, keys.pub2))]
    return TwoServerReport(*parts)


def test_aggregate_drops_malicious(tskeys):
    keys, priv1, priv2 = tskeys
    rng = np.random.default_rng(14)
    reports = [run_ts_client(keys, s, BIG, rng, record_trace=False)[1]
               for s in ([0, 1], [0, 0], [1, 1], [0, 0])]
    reports.insert(2, _malicious_report(keys, 10**6, FieldSpec(), rng))
    res = ts_aggregate(reports, priv1, priv2, BIG)
    assert res.rejected == 1 and res.accepted == 4
    assert not res.transcript[2]["accept"]
    assert res.estimate.estimate == pytest.approx(2.0) and res.estimate.n == 4


def test_aggregate_field_too_small(tskeys):
    keys, priv1, priv2 = tskeys
    rng = np.random.default_rng(15)
    _, rep = run_ts_client(keys, np.zeros((2, 60), dtype=int), BIG, rng, field=F101, record_trace=False)
    with pytest.raises(ConfigurationError):
        ts_aggregate(rep, priv1, priv2, BIG, field=F101)


def test_two_server_matches_single_server(tskeys):
    keys, priv1, priv2 = tskeys
    pub, priv = crypto.keygen(crypto.get_group("test65521"), np.random.default_rng(99))
    rr = RRParams(1.0)
    n, T = 1000, 8
    X = (np.random.default_rng(16).random((T, n)) < 0.05).astype(int)
    single, double = [], []
    for i in range(40):
        _, rep = run_count_client(pub, X, rr, np.random.default_rng(1000 + i), record_trace=False)
        single.append(estimate_count(rep, priv, rr).estimate)
        _, rep2 = run_ts_client(keys, X, rr, np.random.default_rng(2000 + i), record_trace=False)
        double.append(ts_aggregate(rep2, priv1, priv2, rr).estimate.estimate)
    assert stats.ks_2samp(single, double).pvalue > 0.01
    truth = X.any(axis=0).sum()
    sd = math.sqrt(n * rr.flip_prob * (1 - rr.flip_prob)) / (1 - 2 * rr.flip_prob)
    assert abs(np.mean(double) - truth) <= 4 * sd / math.sqrt(40)


def test_reshare_preserves_sum(tskeys):
    keys, priv1, priv2 = tskeys
    rng = np.random.default_rng(17)
    st, _ = run_ts_client(keys, np.array([[1, 0, 1], [0, 0, 0]]), BIG, rng, record_trace=False)
    codec = st.codec
    c1, c2 = st.c1, st.c2
    for _ in range(2):
        c1, c2 = reshare_encrypted(c1, c2, keys, rng)
        s1 = codec.decode(crypto.dec(c1, priv1, bound=codec.bound))
        s2 = codec.decode(crypto.dec(c2, priv2, bound=codec.bound))
        assert np.asarray(st.field.add(s1, s2)).tolist() == [1, 0, 1]


def test_reshare_marginal_exactly_uniform(tskeys):
    keys, priv1, _ = tskeys
    rng = np.random.default_rng(18)
    codec = ShareCodec(keys.pub1.spec, F101)
    b = make_bundle(1, F101, rng)
    c1 = crypto.enc(codec.encode(b.s1), keys.pub1, rng)
    c2 = crypto.enc(codec.encode(b.s2), keys.pub2, rng)
    seen = []
    for r in range(101):
        d1, _ = reshare_encrypted(c1, c2, keys, rng, field=F101, offset=r)
        seen.append(int(codec.decode(crypto.dec(d1, priv1, bound=codec.bound))))
    assert sorted(seen) == list(range(101))
