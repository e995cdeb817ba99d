"""Offline correlated randomness: Beaver triples, AND triples, shared bits, shuffles.

The data owner plays the dealer.  It produces a :class:`CorrelationSet` and
hands each server its half, either in memory or as a binary file::

    magic "OBSK" | u8 version | u8 party | u8 l | u32 n | u32 m
    u64 count[beaver] | u64 count[and] | u64 count[bits] | u64 count[shuffle]
    beaver:  u[c] v[c] w[c]                       (u64 each)
    and:     u[c] v[c] w[c]                       (u64 words, 64 bit-triples per word)
    bits:    b[c]                                 (u8, 0/1)
    shuffle: party 1 -> A1[n*m] B[n*m] pi1[n]     (u64, u64, u32)
             party 2 -> A2[n*m] pi2[n] Delta[n*m]

Servers consume material through a *correlation source*: either a
:class:`PartyCorrelations` pool with a fixed budget, or a feed from an
:class:`OnDemandDealer` that mints matched halves as both parties ask for them.
"""

from __future__ import annotations

import math
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetExhaustedError, CorruptFileError, CorrelationReuseError, PartyMismatchError
from .ring import RING64, U64, Ring

MAGIC = b"OBSK"
VERSION = 1
KINDS = ("beaver", "and", "bits", "shuffle")
_HEADER = struct.Struct("<4sBBBII4Q")


def apply_perm(mat: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Row permutation used everywhere in the package: output row i is ``mat[perm[i]]``."""
    return mat[perm]


# --------------------------------------------------------------------------- types


@dataclass
class BeaverTriples:
    """Shares of ``count`` triples with w = u*v; index 0 is party 1, index 1 is party 2."""

    u: tuple[np.ndarray, np.ndarray]
    v: tuple[np.ndarray, np.ndarray]
    w: tuple[np.ndarray, np.ndarray]

    def __len__(self) -> int:
        return len(self.u[0])


@dataclass
class AndTriples:
    """XOR shares of AND triples packed 64 per ``uint64`` word."""

    u: tuple[np.ndarray, np.ndarray]
    v: tuple[np.ndarray, np.ndarray]
    w: tuple[np.ndarray, np.ndarray]

    @property
    def words(self) -> int:
        return len(self.u[0])


@dataclass
class ShuffleHalf:
    """One server's part of a shuffle correlation.

    Party 1 holds (A1, B, pi1); party 2 holds (A2, pi2, Delta).
    """

    party: int
    n: int
    m: int
    mask: np.ndarray
    perm: np.ndarray
    extra: np.ndarray  # B for party 1, Delta for party 2
    consumed: bool = False

    def take(self) -> ShuffleHalf:
        if self.consumed:
            raise CorrelationReuseError("shuffle correlation already consumed")
        self.consumed = True
        return self


@dataclass
class ShuffleCorrelation:
    A1: np.ndarray
    A2: np.ndarray
    B: np.ndarray
    pi1: np.ndarray
    pi2: np.ndarray
    Delta: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.A1.shape

    def half(self, party: int) -> ShuffleHalf:
        n, m = self.shape
        if party == 1:
            return ShuffleHalf(1, n, m, self.A1, self.pi1, self.B)
        return ShuffleHalf(2, n, m, self.A2, self.pi2, self.Delta)

    def composed(self) -> np.ndarray:
        """Index vector of the joint permutation: shuffled row i is original row ``composed()[i]``."""
        return self.pi1[self.pi2]


# --------------------------------------------------------------------------- generation


def gen_beaver(count: int, rng: np.random.Generator, ring: Ring = RING64, u=None, v=None) -> BeaverTriples:
    uu = ring.random(rng, count) if u is None else ring.reduce(np.broadcast_to(np.asarray(u, U64), (count,)))
    vv = ring.random(rng, count) if v is None else ring.reduce(np.broadcast_to(np.asarray(v, U64), (count,)))
    ww = ring.reduce(uu * vv)
    out = []
    for x in (uu, vv, ww):
        s1 = ring.random(rng, count)
        out.append((s1, ring.reduce(x - s1)))
    return BeaverTriples(*out)


def _rand_words(rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.integers(0, 1 << 64, size=count, dtype=U64)


def gen_and_triples(count: int, rng: np.random.Generator, u=None, v=None) -> AndTriples:
    """``count`` bit-triples, packed into ceil(count/64) words.

    ``u``/``v`` force the plaintext words (e.g. all-ones) for deterministic tests.
    """
    words = -(-count // 64)
    uu = _rand_words(rng, words) if u is None else np.full(words, u, dtype=U64)
    vv = _rand_words(rng, words) if v is None else np.full(words, v, dtype=U64)
    ww = uu & vv
    out = []
    for x in (uu, vv, ww):
        s1 = _rand_words(rng, words)
        out.append((s1, x ^ s1))
    return AndTriples(*out)


def gen_shared_bits(count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s1 = rng.integers(0, 2, size=count, dtype=np.uint8)
    s2 = rng.integers(0, 2, size=count, dtype=np.uint8)
    return s1, s2


def gen_shuffle_correlation(
    n: int, m: int, rng: np.random.Generator, ring: Ring = RING64, pi1=None, pi2=None
) -> ShuffleCorrelation:
    if n < 1 or m < 1:
        raise ValueError("shuffle correlation needs n >= 1 and m >= 1")
    A1 = ring.random(rng, (n, m))
    A2 = ring.random(rng, (n, m))
    B = ring.random(rng, (n, m))
    p1 = rng.permutation(n) if pi1 is None else np.asarray(pi1)
    p2 = rng.permutation(n) if pi2 is None else np.asarray(pi2)
    Delta = ring.reduce(apply_perm(ring.reduce(apply_perm(A2, p1) + A1), p2) - B)
    return ShuffleCorrelation(A1, A2, B, p1.astype(np.int64), p2.astype(np.int64), Delta)


# --------------------------------------------------------------------------- budget


@dataclass
class CorrelationBudget:
    """Units: Beaver triples, AND bit-triples, shared random bits, shuffles."""

    beaver: int = 0
    and_bits: int = 0
    random_bits: int = 0
    shuffles: int = 0

    def __add__(self, other: CorrelationBudget) -> CorrelationBudget:
        return CorrelationBudget(
            self.beaver + other.beaver,
            self.and_bits + other.and_bits,
            self.random_bits + other.random_bits,
            self.shuffles + other.shuffles,
        )

    def scaled(self, factor: float) -> CorrelationBudget:
        return CorrelationBudget(*(math.ceil(x * factor) for x in (self.beaver, self.and_bits, self.random_bits, self.shuffles)))

    @property
    def and_words(self) -> int:
        return -(-self.and_bits // 64)


# every AND request may waste up to 7 bits re-aligning the pool to a byte boundary
_REQ_SLACK = 8


def _prefix_levels(bits: int) -> int:
    levels, s = 0, 1
    while s < bits - 1:
        levels += 1
        s *= 2
    return levels


def sec_ext_cost(batch: int, ring: Ring = RING64) -> tuple[int, int]:
    """(AND bits, AND requests) of one batched MSB extraction."""
    l = ring.bits
    levels = _prefix_levels(l)
    word_ands = 1 + 2 * max(levels - 1, 0) + (1 if levels else 0)
    return batch * l * word_ands, levels + 1


def _and_reduce_cost(lanes: int, length: int) -> tuple[int, int]:
    bits = reqs = 0
    while length > 1:
        bits += lanes * (length // 2)
        reqs += 1
        length = length - length // 2
    return bits, reqs


def obli_dom_cost(pairs: int, m: int, ring: Ring = RING64) -> int:
    bits, reqs = sec_ext_cost(2 * pairs * m, ring)
    bits += 3 * pairs * m + 2 * pairs * m
    reqs += 2
    tb, tr = _and_reduce_cost(2 * pairs, m)
    bits += tb + pairs
    reqs += tr + 1
    return bits + _REQ_SLACK * reqs


def obli_gen_cost(n: int, m: int, ring: Ring = RING64) -> int:
    bits, reqs = sec_ext_cost(2 * n * m, ring)
    bits += n * m
    reqs += 1
    tb, tr = _and_reduce_cost(n, m)
    return bits + tb + _REQ_SLACK * (reqs + tr)


def obli_fetch_cost(max_c: int, max_s: int, m: int, ring: Ring = RING64) -> int:
    # literal mode: per (row, candidate) two single-pair dominance checks plus a 2-bit AND round
    literal = max_c * max_s * (2 * obli_dom_cost(1, m, ring) + 2 + _REQ_SLACK)
    # lookahead mode: per row one batch over the window, a mask round and an OR tree
    tb, tr = _and_reduce_cost(1, max_s)
    lookahead = max_c * (obli_dom_cost(2 * max_s, m, ring) + max_s + tb + _REQ_SLACK * (1 + tr))
    return max(literal, lookahead)


def query_budget(
    n: int, m: int, max_c: int | None = None, max_s: int | None = None, ring: Ring = RING64, overprovision: float = 2.0
) -> CorrelationBudget:
    """Pessimistic material for one query: ObliGen over n rows plus ObliFetch over |C| <= max_c."""
    max_c = n if max_c is None else max_c
    max_s = max_c if max_s is None else max_s
    and_bits = obli_gen_cost(n, m, ring) + obli_fetch_cost(max_c, max_s, m, ring)
    base = CorrelationBudget(beaver=0, and_bits=and_bits, random_bits=max_c * max_s, shuffles=1)
    return base.scaled(overprovision)


# --------------------------------------------------------------------------- sources


class CorrelationSource:
    """Interface every per-party correlation supply implements."""

    party: int
    ring: Ring

    def beaver(self, count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def and_triples(self, count: int, width: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``count`` triples of ``width``-bit words (width 1 means single bits)."""
        raise NotImplementedError

    def random_bits(self, count: int) -> np.ndarray:
        raise NotImplementedError

    def shuffle(self, n: int, m: int) -> ShuffleHalf:
        raise NotImplementedError

    consumed: dict


def _width_dtype(width: int) -> np.dtype:
    if width not in (8, 16, 32, 64):
        raise ValueError(f"unsupported word width {width}")
    return np.dtype(f"<u{width // 8}")


class PartyCorrelations(CorrelationSource):
    """One party's fixed pool of dealer material, consumed strictly forward."""

    def __init__(
        self,
        party: int,
        n: int,
        m: int,
        ring: Ring,
        beaver: tuple[np.ndarray, np.ndarray, np.ndarray],
        and_words: tuple[np.ndarray, np.ndarray, np.ndarray],
        bits: np.ndarray,
        shuffles: list[ShuffleHalf],
    ):
        self.party = party
        self.n, self.m, self.ring = n, m, ring
        self._beaver = beaver
        self._and = and_words
        self._and_bytes = tuple(np.ascontiguousarray(a, dtype="<u8").view(np.uint8) for a in and_words)
        self._bits = bits
        self._shuffles = shuffles
        self._cursor = {"beaver": 0, "and": 0, "bits": 0, "shuffle": 0}
        self.consumed = {"beaver": 0, "and_bits": 0, "random_bits": 0, "shuffles": 0}

    @property
    def counts(self) -> dict[str, int]:
        return {
            "beaver": len(self._beaver[0]),
            "and": len(self._and[0]),
            "bits": len(self._bits),
            "shuffle": len(self._shuffles),
        }

    def position(self) -> dict[str, int]:
        """Cursor into each pool; two matched views must agree before a query."""
        return dict(self._cursor)

    def seek(self, position: dict[str, int]) -> None:
        """Skip material already spent (e.g. by an earlier daemon run)."""
        counts = {"beaver": self.counts["beaver"], "and": 64 * self.counts["and"],
                  "bits": self.counts["bits"], "shuffle": self.counts["shuffle"]}
        for kind, pos in position.items():
            if kind not in self._cursor:
                raise ValueError(f"unknown pool {kind!r}")
            if not self._cursor[kind] <= pos <= counts[kind]:
                raise ValueError(f"cannot move {kind} cursor from {self._cursor[kind]} to {pos}")
            self._cursor[kind] = int(pos)

    def _exhausted(self, kind: str, requested: int, available: int):
        return BudgetExhaustedError(kind, requested, available, self.consumed)

    def beaver(self, count: int):
        c = self._cursor["beaver"]
        total = len(self._beaver[0])
        if c + count > total:
            raise self._exhausted("beaver", count, total - c)
        self._cursor["beaver"] = c + count
        self.consumed["beaver"] += count
        return tuple(a[c : c + count] for a in self._beaver)

    def and_triples(self, count: int, width: int = 1):
        total_bits = 8 * len(self._and_bytes[0])
        pos = self._cursor["and"]
        if width == 1:
            byte0 = pos // 8
            end = pos + count
            if end > total_bits:
                raise self._exhausted("and_bits", count, total_bits - pos)
            byte1 = -(-end // 8)
            off = pos - 8 * byte0
            out = tuple(
                np.unpackbits(b[byte0:byte1], bitorder="little")[off : off + count].astype(U64) for b in self._and_bytes
            )
        else:
            dtype = _width_dtype(width)
            byte0 = -(-pos // 8)
            nbytes = count * dtype.itemsize
            end = 8 * (byte0 + nbytes)
            if end > total_bits:
                raise self._exhausted("and_bits", count * width, total_bits - 8 * byte0)
            out = tuple(b[byte0 : byte0 + nbytes].view(dtype).astype(U64, copy=False) for b in self._and_bytes)
        self.consumed["and_bits"] += end - pos
        self._cursor["and"] = end
        return out

    def random_bits(self, count: int) -> np.ndarray:
        c = self._cursor["bits"]
        if c + count > len(self._bits):
            raise self._exhausted("random_bits", count, len(self._bits) - c)
        self._cursor["bits"] = c + count
        self.consumed["random_bits"] += count
        return self._bits[c : c + count].astype(U64)

    def shuffle(self, n: int, m: int) -> ShuffleHalf:
        c = self._cursor["shuffle"]
        if c >= len(self._shuffles):
            raise self._exhausted("shuffle", 1, 0)
        half = self._shuffles[c]
        if (half.n, half.m) != (n, m):
            raise ValueError(f"shuffle correlation is for {half.n}x{half.m}, database is {n}x{m}")
        self._cursor["shuffle"] = c + 1
        self.consumed["shuffles"] += 1
        return half


@dataclass
class CorrelationSet:
    """Dealer output for both parties."""

    n: int
    m: int
    ring: Ring
    beaver: BeaverTriples
    ands: AndTriples
    bits: tuple[np.ndarray, np.ndarray]
    shuffles: list[ShuffleCorrelation] = field(default_factory=list)

    def party_view(self, party: int) -> PartyCorrelations:
        i = party - 1
        return PartyCorrelations(
            party,
            self.n,
            self.m,
            self.ring,
            (self.beaver.u[i], self.beaver.v[i], self.beaver.w[i]),
            (self.ands.u[i], self.ands.v[i], self.ands.w[i]),
            self.bits[i],
            [s.half(party) for s in self.shuffles],
        )

    def self_test(self) -> None:
        """Check every correlation's defining identity; raises AssertionError on failure."""
        r = self.ring
        b = self.beaver
        u = r.reduce(b.u[0] + b.u[1])
        v = r.reduce(b.v[0] + b.v[1])
        w = r.reduce(b.w[0] + b.w[1])
        assert np.array_equal(w, r.reduce(u * v)), "beaver identity violated"
        a = self.ands
        assert np.array_equal(a.w[0] ^ a.w[1], (a.u[0] ^ a.u[1]) & (a.v[0] ^ a.v[1])), "AND identity violated"
        for s in self.shuffles:
            expect = r.reduce(apply_perm(r.reduce(apply_perm(s.A2, s.pi1) + s.A1), s.pi2) - s.B)
            assert np.array_equal(s.Delta, expect), "shuffle identity violated"


def gen_correlations(
    budget: CorrelationBudget, n: int, m: int, rng: np.random.Generator, ring: Ring = RING64, check: bool = True
) -> CorrelationSet:
    cs = CorrelationSet(
        n,
        m,
        ring,
        gen_beaver(budget.beaver, rng, ring),
        gen_and_triples(budget.and_bits, rng),
        gen_shared_bits(budget.random_bits, rng),
        [gen_shuffle_correlation(n, m, rng, ring) for _ in range(budget.shuffles)],
    )
    if check:
        cs.self_test()
    return cs


class OnDemandDealer:
    """A trusted dealer that mints matched correlation halves lazily.

    Both parties request material in the same order (the engine is lock-step),
    so the i-th request of each party for a kind receives the two halves of the
    same freshly generated batch.
    """

    def __init__(self, rng: np.random.Generator | int | None = None, ring: Ring = RING64):
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.ring = ring
        self._lock = threading.Lock()
        self._queues: dict[int, dict[str, deque]] = {1: {}, 2: {}}
        self.shuffles_issued: list[ShuffleCorrelation] = []

    def feed(self, party: int) -> DealerFeed:
        return DealerFeed(self, party)

    def _take(self, party: int, kind: str, make):
        with self._lock:
            q = self._queues[party].setdefault(kind, deque())
            if not q:
                h1, h2 = make()
                q.append((h1, h2)[party - 1])
                self._queues[3 - party].setdefault(kind, deque()).append((h1, h2)[2 - party])
            return q.popleft()

    def _beaver(self, count):
        t = gen_beaver(count, self.rng, self.ring)
        return (t.u[0], t.v[0], t.w[0]), (t.u[1], t.v[1], t.w[1])

    def _and(self, count, width):
        rng = self.rng
        if width == 1:
            u, v = rng.integers(0, 2, size=(2, count), dtype=U64)
            mask = U64(1)
        else:
            u, v = rng.integers(0, 1 << width, size=(2, count), dtype=U64)
            mask = U64((1 << width) - 1)
        w = u & v
        s = rng.integers(0, 1 << 64, size=(3, count), dtype=U64) & mask
        return (s[0], s[1], s[2]), (u ^ s[0], v ^ s[1], w ^ s[2])

    def _shuffle(self, n, m):
        sc = gen_shuffle_correlation(n, m, self.rng, self.ring)
        self.shuffles_issued.append(sc)
        return sc.half(1), sc.half(2)


class DealerFeed(CorrelationSource):
    def __init__(self, dealer: OnDemandDealer, party: int):
        self.dealer = dealer
        self.party = party
        self.ring = dealer.ring
        self.consumed = {"beaver": 0, "and_bits": 0, "random_bits": 0, "shuffles": 0}

    def beaver(self, count):
        self.consumed["beaver"] += count
        return self.dealer._take(self.party, "beaver", lambda: self.dealer._beaver(count))

    def and_triples(self, count, width=1):
        self.consumed["and_bits"] += count * width
        return self.dealer._take(self.party, "and", lambda: self.dealer._and(count, width))

    def random_bits(self, count):
        self.consumed["random_bits"] += count

        def make():
            s1, s2 = gen_shared_bits(count, self.dealer.rng)
            return s1.astype(U64), s2.astype(U64)

        return self.dealer._take(self.party, "bits", make)

    def shuffle(self, n, m):
        self.consumed["shuffles"] += 1
        return self.dealer._take(self.party, "shuffle", lambda: self.dealer._shuffle(n, m))


# --------------------------------------------------------------------------- files


def write_correlations(cs: CorrelationSet, party: int, path) -> None:
    i = party - 1
    counts = (len(cs.beaver), cs.ands.words, len(cs.bits[0]), len(cs.shuffles))
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, party, cs.ring.bits, cs.n, cs.m, *counts))
        for arr in (cs.beaver.u[i], cs.beaver.v[i], cs.beaver.w[i], cs.ands.u[i], cs.ands.v[i], cs.ands.w[i]):
            fh.write(np.ascontiguousarray(arr, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(cs.bits[i], dtype=np.uint8).tobytes())
        for s in cs.shuffles:
            h = s.half(party)
            if party == 1:
                parts = (h.mask.astype("<u8"), h.extra.astype("<u8"), h.perm.astype("<u4"))
            else:
                parts = (h.mask.astype("<u8"), h.perm.astype("<u4"), h.extra.astype("<u8"))
            for p in parts:
                fh.write(np.ascontiguousarray(p).tobytes())


def read_correlation_header(buf: bytes) -> dict:
    if len(buf) < _HEADER.size:
        raise CorruptFileError("correlation file truncated in header")
    magic, version, party, l, n, m, *counts = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"unsupported correlation file version {version}")
    if party not in (1, 2):
        raise CorruptFileError(f"bad party byte {party}")
    return {"party": party, "l": l, "n": n, "m": m, "counts": dict(zip(KINDS, counts))}


def read_correlations(path, party: int | None = None) -> PartyCorrelations:
    """Load one party's pool; ``party`` (when given) must match the file header."""
    buf = Path(path).read_bytes()
    hdr = read_correlation_header(buf)
    if party is not None and hdr["party"] != party:
        raise PartyMismatchError(f"file holds party {hdr['party']} material, reader is party {party}")
    try:
        ring = Ring(hdr["l"])
    except ValueError as exc:
        raise CorruptFileError(str(exc)) from None
    n, m, c = hdr["n"], hdr["m"], hdr["counts"]
    pos = _HEADER.size

    def take(count, dtype):
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(buf):
            raise CorruptFileError("correlation file truncated")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
        pos += nbytes
        return arr

    beaver = tuple(take(c["beaver"], "<u8").astype(U64) for _ in range(3))
    ands = tuple(take(c["and"], "<u8").astype(U64) for _ in range(3))
    bits = take(c["bits"], np.uint8).copy()
    shuffles = []
    for _ in range(c["shuffle"]):
        if hdr["party"] == 1:
            a = take(n * m, "<u8").astype(U64).reshape(n, m)
            extra = take(n * m, "<u8").astype(U64).reshape(n, m)
            perm = take(n, "<u4").astype(np.int64)
        else:
            a = take(n * m, "<u8").astype(U64).reshape(n, m)
            perm = take(n, "<u4").astype(np.int64)
            extra = take(n * m, "<u8").astype(U64).reshape(n, m)
        shuffles.append(ShuffleHalf(hdr["party"], n, m, a, perm, extra))
    if pos != len(buf):
        raise CorruptFileError(f"{len(buf) - pos} trailing bytes after payload")
    return PartyCorrelations(hdr["party"], n, m, ring, beaver, ands, bits, shuffles)
