from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.stats import chisquare

from skyline2pc.dealer import (
    CorrelationBudget,
    OnDemandDealer,
    apply_perm,
    gen_and_triples,
    gen_beaver,
    gen_correlations,
    gen_shared_bits,
    gen_shuffle_correlation,
    query_budget,
    read_correlation_header,
    read_correlations,
    write_correlations,
)
from skyline2pc.errors import BudgetExhaustedError, CorrelationReuseError, CorruptFileError, PartyMismatchError
from skyline2pc.ring import RING8, RING64

U64 = np.uint64


def test_beaver_identity_10k():
    t = gen_beaver(10_000, np.random.default_rng(0))
    u = t.u[0] + t.u[1]
    v = t.v[0] + t.v[1]
    w = t.w[0] + t.w[1]
    # oracle: Python big-int product reduced mod 2^64
    expect = [(int(a) * int(b)) % 2**64 for a, b in zip(u[:200], v[:200])]
    assert [int(x) for x in w[:200]] == expect
    assert np.array_equal(w, u * v)


def test_beaver_edge_cases():
    assert len(gen_beaver(0, np.random.default_rng(0))) == 0
    t = gen_beaver(50, np.random.default_rng(1), u=0)
    assert not np.any(t.w[0] + t.w[1])


def test_beaver_narrow_ring():
    t = gen_beaver(1000, np.random.default_rng(2), RING8)
    u = RING8.reduce(t.u[0] + t.u[1])
    v = RING8.reduce(t.v[0] + t.v[1])
    assert np.array_equal(RING8.reduce(t.w[0] + t.w[1]), RING8.reduce(u * v))


def test_and_triples_100k():
    t = gen_and_triples(100_000, np.random.default_rng(3))
    u = t.u[0] ^ t.u[1]
    v = t.v[0] ^ t.v[1]
    assert t.words == 1563
    assert np.array_equal(t.w[0] ^ t.w[1], u & v)


def test_and_triples_forced():
    all_ones = 2**64 - 1
    t = gen_and_triples(64, np.random.default_rng(4), u=all_ones, v=all_ones)
    assert int(t.w[0][0] ^ t.w[1][0]) == all_ones
    t = gen_and_triples(64, np.random.default_rng(4), u=0)
    assert int(t.w[0][0] ^ t.w[1][0]) == 0


def test_shared_bits_frequency():
    s1, s2 = gen_shared_bits(100_000, np.random.default_rng(5))
    assert 0.49 <= float(np.mean(s1 ^ s2)) <= 0.51
    for s in (s1, s2):
        assert chisquare(np.bincount(s, minlength=2)).pvalue > 0.001
    e1, e2 = gen_shared_bits(0, np.random.default_rng(5))
    assert len(e1) == len(e2) == 0


def test_shuffle_single_row():
    sc = gen_shuffle_correlation(1, 3, np.random.default_rng(6), pi1=[0], pi2=[0])
    assert np.array_equal(sc.Delta, sc.A1 + sc.A2 - sc.B)


def test_shuffle_delta_recomputed():
    rng = np.random.default_rng(7)
    sc = gen_shuffle_correlation(8, 3, rng)
    # oracle: explicit row loops instead of fancy indexing
    step1 = np.array([sc.A2[sc.pi1[i]] for i in range(8)]) + sc.A1
    step2 = np.array([step1[sc.pi2[i]] for i in range(8)])
    assert np.array_equal(sc.Delta, step2 - sc.B)
    assert sorted(sc.pi1.tolist()) == list(range(8))
    assert np.array_equal(sc.composed(), apply_perm(sc.pi1, sc.pi2))


def test_shuffle_permutation_uniform():
    rng = np.random.default_rng(8)
    cells = {p: i for i, p in enumerate(itertools.permutations(range(4)))}
    counts = np.zeros(24)
    for _ in range(10_000):
        counts[cells[tuple(gen_shuffle_correlation(4, 1, rng).pi1.tolist())]] += 1
    assert chisquare(counts).pvalue > 0.001


def test_shuffle_reuse_rejected():
    half = gen_shuffle_correlation(3, 2, np.random.default_rng(9)).half(1)
    half.take()
    with pytest.raises(CorrelationReuseError):
        half.take()


def _small_set(seed=10, ring=RING64):
    budget = CorrelationBudget(beaver=17, and_bits=1000, random_bits=33, shuffles=2)
    return gen_correlations(budget, 10, 5, np.random.default_rng(seed), ring)


def test_self_test_detects_corruption():
    cs = _small_set()
    cs.self_test()
    cs.beaver.w[0][0] += U64(1)
    with pytest.raises(AssertionError):
        cs.self_test()


def test_file_roundtrip(tmp_path):
    cs = _small_set()
    for party in (1, 2):
        path = tmp_path / f"c{party}.bin"
        write_correlations(cs, party, path)
        hdr = read_correlation_header(path.read_bytes())
        assert (hdr["party"], hdr["l"], hdr["n"], hdr["m"]) == (party, 64, 10, 5)
        assert hdr["counts"] == {"beaver": 17, "and": 16, "bits": 33, "shuffle": 2}
        view = read_correlations(path, party)
        mem = cs.party_view(party)
        assert all(np.array_equal(a, b) for a, b in zip(view.beaver(17), mem.beaver(17)))
        assert all(np.array_equal(a, b) for a, b in zip(view.and_triples(1000), mem.and_triples(1000)))
        assert np.array_equal(view.random_bits(33), mem.random_bits(33))
        for _ in range(2):
            h1, h2 = view.shuffle(10, 5), mem.shuffle(10, 5)
            assert np.array_equal(h1.mask, h2.mask) and np.array_equal(h1.perm, h2.perm)
            assert np.array_equal(h1.extra, h2.extra)
        # writing twice gives identical bytes
        write_correlations(cs, party, tmp_path / "again.bin")
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_file_errors(tmp_path):
    cs = _small_set()
    path = tmp_path / "c1.bin"
    write_correlations(cs, 1, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-5])
    with pytest.raises(CorruptFileError):
        read_correlations(tmp_path / "trunc.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptFileError):
        read_correlations(tmp_path / "magic.bin")
    (tmp_path / "ver.bin").write_bytes(raw[:4] + b"\x07" + raw[5:])
    with pytest.raises(CorruptFileError):
        read_correlations(tmp_path / "ver.bin")
    (tmp_path / "tail.bin").write_bytes(raw + b"\x00")
    with pytest.raises(CorruptFileError):
        read_correlations(tmp_path / "tail.bin")
    with pytest.raises(PartyMismatchError):
        read_correlations(path, party=2)


def test_pool_exhaustion_reports_consumption():
    pool = _small_set().party_view(1)
    pool.beaver(10)
    with pytest.raises(BudgetExhaustedError) as ei:
        pool.beaver(8)
    assert ei.value.consumed["beaver"] == 10
    pool.and_triples(900)
    with pytest.raises(BudgetExhaustedError):
        pool.and_triples(200)
    with pytest.raises(BudgetExhaustedError):
        pool.random_bits(34)


def test_pool_cursor_only_moves_forward():
    pool = _small_set().party_view(2)
    start = pool.position()
    pool.and_triples(3)
    pool.and_triples(2, width=8)  # word requests re-align to a byte boundary
    pos = pool.position()
    assert pos["and"] == 8 + 16 and pool.consumed["and_bits"] == 24
    assert start["and"] == 0
    with pytest.raises(ValueError):
        pool.seek({"and": 0})
    pool.seek({"and": 64})
    assert pool.position()["and"] == 64


def test_pool_halves_match():
    cs = _small_set(11)
    p1, p2 = cs.party_view(1), cs.party_view(2)
    for width in (1, 8, 64, 1):
        u1, v1, w1 = p1.and_triples(7, width)
        u2, v2, w2 = p2.and_triples(7, width)
        assert np.array_equal(w1 ^ w2, (u1 ^ u2) & (v1 ^ v2))


def test_on_demand_dealer_matches_halves():
    d = OnDemandDealer(12)
    f1, f2 = d.feed(1), d.feed(2)
    u1, v1, w1 = f1.beaver(5)
    u2, v2, w2 = f2.beaver(5)
    assert np.array_equal(w1 + w2, (u1 + u2) * (v1 + v2))
    a1, a2 = f2.and_triples(9, 64), f1.and_triples(9, 64)  # order across parties does not matter
    assert np.array_equal(a1[2] ^ a2[2], (a1[0] ^ a2[0]) & (a1[1] ^ a2[1]))
    h1, h2 = f1.shuffle(4, 2), f2.shuffle(4, 2)
    assert (h1.party, h2.party) == (1, 2)
    assert d.shuffles_issued[0].half(1).perm is h1.perm


def test_budget_monotone_and_scaled():
    small = query_budget(100, 5, 10, 5)
    large = query_budget(1000, 5, 10, 5)
    assert large.and_bits > small.and_bits
    assert query_budget(100, 5, 20, 20).and_bits > query_budget(100, 5, 10, 10).and_bits
    base = query_budget(100, 5, 10, 5, overprovision=1.0)
    assert small.and_bits == pytest.approx(2 * base.and_bits, abs=1)
    assert (base + base).shuffles == 2
