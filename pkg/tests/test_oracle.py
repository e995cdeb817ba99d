from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skyline2pc.oracle import PlainQuery, as_multiset, bnl_skyline, brute_skyline, dominates, in_region


@st.composite
def instances(draw):
    m = draw(st.integers(1, 4))
    n = draw(st.integers(0, 30))
    rows = draw(st.lists(st.lists(st.integers(0, 5), min_size=m, max_size=m), min_size=n, max_size=n))
    k = draw(st.integers(1, m))
    dims = draw(st.permutations(range(m)))[:k]
    ranges = []
    for _ in dims:
        a, b = sorted((draw(st.integers(0, 6)), draw(st.integers(0, 6))))
        ranges.append((a, b))
    prefs = draw(st.lists(st.sampled_from(["min", "max"]), min_size=k, max_size=k))
    return np.array(rows, dtype=np.uint64).reshape(n, m), PlainQuery(tuple(dims), tuple(ranges), tuple(prefs))


@settings(max_examples=300)
@given(instances())
def test_bnl_equals_brute(inst):
    db, q = inst
    assert as_multiset(bnl_skyline(db, q)) == as_multiset(brute_skyline(db, q))


@settings(max_examples=200)
@given(instances())
def test_skyline_properties(inst):
    db, q = inst
    sky = bnl_skyline(db, q)
    region = [tuple(int(v) for v in t) for t in db if in_region(t, q)]
    # nothing in the skyline is dominated by a region row, everything left out is
    for t in sky:
        assert not any(dominates(x, t, q) for x in region)
    left = as_multiset(region)
    for t in sky:
        left.remove(t)
    for t in left:
        assert any(dominates(x, t, q) for x in region)


def test_dominance_is_strict_and_irreflexive():
    q = PlainQuery((0, 1), ((0, 9), (0, 9)), ("min", "max"))
    assert dominates((1, 5), (2, 5), q)
    assert dominates((1, 6), (1, 5), q)
    assert not dominates((1, 5), (1, 5), q)
    assert not dominates((0, 0), (1, 1), q)


def test_duplicates_both_survive():
    q = PlainQuery((0,), ((0, 9),), ("min",))
    db = [[1, 7], [1, 7], [2, 0]]
    assert as_multiset(bnl_skyline(db, q)) == [(1, 7), (1, 7)]


def test_empty_region():
    q = PlainQuery((0,), ((50, 60),), ("max",))
    assert bnl_skyline([[1], [2]], q) == [] and brute_skyline([[1], [2]], q) == []


@pytest.mark.parametrize("bad", [
    dict(dims=(), ranges=(), prefs=()),
    dict(dims=(0, 0), ranges=((0, 1), (0, 1)), prefs=("min", "min")),
    dict(dims=(0,), ranges=((3, 1),), prefs=("min",)),
    dict(dims=(0,), ranges=((0, 1),), prefs=("low",)),
    dict(dims=(0, 1), ranges=((0, 1),), prefs=("min", "max")),
])
def test_invalid_queries(bad):
    with pytest.raises(ValueError):
        PlainQuery(**bad)
