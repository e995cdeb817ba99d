"""Plaintext user-defined skyline: dominance, constrained region, BNL.

This is the ground truth every encrypted-path test compares against.
Dimensions are 0-based throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Pref = str  # "min" | "max"


@dataclass(frozen=True)
class PlainQuery:
    """Selected dimensions with a closed range and a min/max preference each."""

    dims: tuple[int, ...]
    ranges: tuple[tuple[int, int], ...]
    prefs: tuple[Pref, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "ranges", tuple((int(lo), int(hi)) for lo, hi in self.ranges))
        object.__setattr__(self, "prefs", tuple(self.prefs))
        if not self.dims:
            raise ValueError("a query selects at least one dimension")
        if len(set(self.dims)) != len(self.dims):
            raise ValueError("selected dimensions must be distinct")
        if not (len(self.dims) == len(self.ranges) == len(self.prefs)):
            raise ValueError("dims, ranges and prefs must have equal length")
        for lo, hi in self.ranges:
            if lo > hi:
                raise ValueError(f"inverted range ({lo}, {hi})")
        for p in self.prefs:
            if p not in ("min", "max"):
                raise ValueError(f"preference must be 'min' or 'max', got {p!r}")

    @property
    def k(self) -> int:
        return len(self.dims)


def dominates(a: Sequence[int], b: Sequence[int], q: PlainQuery) -> bool:
    """True iff ``a`` dominates ``b`` on the query's dimensions and preferences."""
    strict = False
    for d, p in zip(q.dims, q.prefs):
        x, y = a[d], b[d]
        if (p == "min" and x > y) or (p == "max" and x < y):
            return False
        if x != y:
            strict = True
    return strict


def in_region(t: Sequence[int], q: PlainQuery) -> bool:
    return all(lo <= t[d] <= hi for d, (lo, hi) in zip(q.dims, q.ranges))


def region_filter(db, q: PlainQuery) -> list[tuple[int, ...]]:
    return [tuple(int(v) for v in t) for t in db if in_region(t, q)]


def bnl_skyline(db, q: PlainQuery) -> list[tuple[int, ...]]:
    """Block-nested-loop skyline of the region-filtered database (multiset, window order)."""
    window: list[tuple[int, ...]] = []
    for t in region_filter(db, q):
        dominated = False
        keep = []
        for x in window:
            if dominated:
                keep.append(x)
            elif dominates(x, t, q):
                dominated = True
                keep.append(x)
            elif not dominates(t, x, q):
                keep.append(x)
        window = keep
        if not dominated:
            window.append(t)
    return window


def brute_skyline(db, q: PlainQuery) -> list[tuple[int, ...]]:
    """Definition-level O(n^2) skyline, independent of the BNL window logic."""
    rows = region_filter(db, q)
    if not rows:
        return []
    arr = np.asarray(rows, dtype=np.int64)
    cols = arr[:, list(q.dims)]
    sign = np.array([1 if p == "min" else -1 for p in q.prefs])
    key = cols * sign  # smaller is better on every column
    le = (key[:, None, :] <= key[None, :, :]).all(axis=2)
    ne = (key[:, None, :] != key[None, :, :]).any(axis=2)
    dom = le & ne  # dom[i, j]: row i dominates row j
    keep = ~dom.any(axis=0)
    return [tuple(int(v) for v in row) for row in arr[keep]]


def as_multiset(rows) -> list[tuple[int, ...]]:
    return sorted(tuple(int(v) for v in r) for r in rows)
