"""Oblivious user-defined skyline processing on the two servers.

Per query: shuffle the shared database, keep the shuffled rows that fall in the
encrypted region (only the per-row in/out bits are opened), then run a secure
block-nested loop over that sub-database.  Dominance bits used to discard a row
are opened only after being ANDed with a fresh random bit, so a server never
learns how many rows a skyline tuple dominates; rows kept by the mask carry a
shared ``isDomi`` flag that the user filters on after decryption.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .engine import Session, and_reduce, band, bnot, open_bits, or_reduce, sec_ext, sec_leq
from .errors import CorruptFileError, PartyMismatchError
from .ring import U64
from .shuffle import obli_shuff

FETCH_MODES = ("lookahead", "literal")
MASK_SOURCES = ("local", "dealer")


# --------------------------------------------------------------------------- types


@dataclass
class EncryptedQuery:
    """One server's shares of the extended region and the 2-bit preference codes."""

    party: int
    lo: np.ndarray  # (m,) arithmetic
    hi: np.ndarray  # (m,) arithmetic
    p1: np.ndarray  # (m,) bit: dimension not selected
    p2: np.ndarray  # (m,) bit: prefer maximum

    @property
    def m(self) -> int:
        return len(self.lo)

    _HDR = struct.Struct("<4sBI")

    def to_bytes(self) -> bytes:
        return (
            self._HDR.pack(b"OBQY", self.party, self.m)
            + np.asarray(self.lo, dtype="<u8").tobytes()
            + np.asarray(self.hi, dtype="<u8").tobytes()
            + np.asarray(self.p1, dtype=np.uint8).tobytes()
            + np.asarray(self.p2, dtype=np.uint8).tobytes()
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> EncryptedQuery:
        if len(buf) < cls._HDR.size:
            raise CorruptFileError("query payload truncated")
        magic, party, m = cls._HDR.unpack_from(buf)
        if magic != b"OBQY":
            raise CorruptFileError("bad query magic")
        if len(buf) != cls._HDR.size + 18 * m:
            raise CorruptFileError("query payload has wrong length")
        pos = cls._HDR.size
        lo = np.frombuffer(buf, "<u8", m, pos).astype(U64)
        hi = np.frombuffer(buf, "<u8", m, pos + 8 * m).astype(U64)
        p1 = np.frombuffer(buf, np.uint8, m, pos + 16 * m).astype(U64)
        p2 = np.frombuffer(buf, np.uint8, m, pos + 17 * m).astype(U64)
        return cls(party, lo, hi, p1, p2)


@dataclass
class ResultSet:
    """One server's shares of the ordered (tuple, isDomi) result entries."""

    party: int
    m: int
    tuples: list[np.ndarray] = field(default_factory=list)
    is_domi: list[np.ndarray] = field(default_factory=list)
    source_rows: list[int] = field(default_factory=list)  # index of each entry in C (public to servers)

    def __len__(self) -> int:
        return len(self.tuples)

    _HDR = struct.Struct("<4sBII")

    def to_bytes(self) -> bytes:
        parts = [self._HDR.pack(b"OBRS", self.party, len(self), self.m)]
        for t, d in zip(self.tuples, self.is_domi):
            parts.append(np.asarray(t, dtype="<u8").tobytes())
            parts.append(bytes([int(d) & 1]))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> ResultSet:
        if len(buf) < cls._HDR.size:
            raise CorruptFileError("result payload truncated")
        magic, party, count, m = cls._HDR.unpack_from(buf)
        if magic != b"OBRS":
            raise CorruptFileError("bad result magic")
        rec = 8 * m + 1
        if len(buf) != cls._HDR.size + count * rec:
            raise CorruptFileError("result payload has wrong length")
        rs = cls(party, m)
        pos = cls._HDR.size
        for _ in range(count):
            rs.tuples.append(np.frombuffer(buf, "<u8", m, pos).astype(U64))
            rs.is_domi.append(U64(buf[pos + 8 * m]))
            pos += rec
        return rs


@dataclass
class FetchEvent:
    """One opening inside the fetch loop, in C-index space (public to both servers)."""

    row: int
    candidate: int
    label: str  # "phi1_masked" or "phi2"
    value: int


@dataclass
class QueryStats:
    n: int = 0
    m: int = 0
    c_size: int = 0
    s_size: int = 0
    rounds: int = 0
    bytes_sent: int = 0
    bytes_recv: int = 0
    seconds: dict = field(default_factory=dict)
    events: list[FetchEvent] = field(default_factory=list)
    delta_hat: np.ndarray | None = None


# ----------------------------------------------------------------------- subroutines


def obli_gen(sess: Session, db: np.ndarray, lo: np.ndarray, hi: np.ndarray, chunk: int | None = None):
    """Select the rows of the (shuffled) shared database inside the shared region.

    Every row's 2m comparisons are batched together with every other row's,
    then the in-region bit of each row is opened.  Returns ``(C, delta_hat)``
    where ``C`` is this party's share of the kept rows in order.
    """
    db = np.asarray(db, dtype=U64)
    n, m = db.shape
    if len(lo) != m or len(hi) != m:
        raise ValueError(f"region has {len(lo)} dimensions, database has {m}")
    if n == 0:
        return db.copy(), np.zeros(0, dtype=U64)
    chunk = n if chunk is None else max(1, chunk)
    opened = []
    for start in range(0, n, chunk):
        rows = db[start : start + chunk]
        k = len(rows)
        lo_b = np.broadcast_to(lo, (k, m))
        hi_b = np.broadcast_to(hi, (k, m))
        # alpha: lo <= t, beta: t <= hi, both as NOT of an MSB extraction
        ext = sec_ext(sess, np.stack([rows, hi_b]), np.stack([lo_b, rows]))
        both = bnot(sess, ext)
        delta = band(sess, both[0], both[1])
        delta_hat = and_reduce(sess, delta)
        opened.append(open_bits(sess, delta_hat, "delta_hat"))
    flags = np.concatenate(opened)
    return db[flags == 1].copy(), flags


def obli_dom(sess: Session, a, b, p1, p2) -> np.ndarray:
    """Shared bit per row pair: does ``a[i]`` dominate ``b[i]`` under the shared preferences.

    ``a`` and ``b`` are (P, m) shares; ``p1``/``p2`` are the (m,) preference bits.
    All 2*P*m comparisons go out as one batch.
    """
    a = np.atleast_2d(np.asarray(a, dtype=U64))
    b = np.atleast_2d(np.asarray(b, dtype=U64))
    P, m = a.shape
    lt = sec_ext(sess, np.concatenate([b, a]), np.concatenate([a, b]))
    alpha = bnot(sess, lt[:P])  # a[i] <= b[i]
    alpha_r = bnot(sess, lt[P:])  # b[i] <= a[i]
    p1b = np.broadcast_to(np.asarray(p1, dtype=U64), (P, m))
    p2b = np.broadcast_to(np.asarray(p2, dtype=U64), (P, m))

    beta, beta_r, both = band(sess, np.stack([bnot(sess, p2b), p2b, alpha]), np.stack([alpha, alpha_r, alpha_r]))
    phi = beta ^ beta_r
    np1 = bnot(sess, p1b)
    t = band(sess, np.stack([bnot(sess, phi), bnot(sess, both)]), np.stack([np1, np1]))
    sigma = bnot(sess, t[0])
    omega = t[1]
    # AND over sigma and OR over omega share one tree: OR(w) = NOT AND(NOT w)
    red = and_reduce(sess, np.stack([sigma, bnot(sess, omega)]))
    sigma_hat = red[0]
    omega_hat = bnot(sess, red[1])
    return band(sess, sigma_hat, omega_hat)


def mask_bit(sess: Session, phi1, r=None, mask_source: str = "local") -> np.ndarray:
    """Open phi1 AND r for a fresh shared random bit r; returns the opened bits.

    With ``mask_source="local"`` each party samples its own share of r.
    """
    phi1 = np.atleast_1d(np.asarray(phi1, dtype=U64))
    r = _mask_shares(sess, phi1.size, mask_source) if r is None else np.atleast_1d(np.asarray(r, dtype=U64))
    return open_bits(sess, band(sess, phi1, r.reshape(phi1.shape)), "phi1_masked")


def _mask_shares(sess: Session, count: int, mask_source: str) -> np.ndarray:
    if mask_source == "local":
        return sess.rng.integers(0, 2, size=count, dtype=U64)
    if mask_source == "dealer":
        return sess.corr.random_bits(count)
    raise ValueError(f"unknown mask source {mask_source!r}")


def _const_bit(sess: Session, value: int) -> np.ndarray:
    return np.asarray([value if sess.party == 1 else 0], dtype=U64)


def obli_fetch(
    sess: Session,
    C: np.ndarray,
    p1,
    p2,
    *,
    mode: str = "lookahead",
    mask_source: str = "local",
    events: list | None = None,
) -> ResultSet:
    """Secure block-nested loop over the shared sub-database ``C``.

    ``mode="literal"`` evaluates each (candidate, row) pair in turn exactly as
    the algorithm is written.  ``mode="lookahead"`` evaluates the dominance bits
    of a row against the whole current window in one batch, then opens them in
    the same per-candidate order with the same early exit; the opened bits and
    the resulting window are distributed identically, only with fewer rounds.
    """
    if mode not in FETCH_MODES:
        raise ValueError(f"unknown fetch mode {mode!r}")
    C = np.asarray(C, dtype=U64)
    m = C.shape[1] if C.ndim == 2 else len(p1)
    rs = ResultSet(sess.party, m)
    if len(C) == 0:
        return rs
    window: list[tuple[int, np.ndarray, np.ndarray]] = [(0, C[0], _const_bit(sess, 0))]
    for i in range(1, len(C)):
        t = C[i]
        if mode == "literal":
            inserted, window = _fetch_row_literal(sess, i, t, window, p1, p2, mask_source, events)
        else:
            inserted, window = _fetch_row_lookahead(sess, i, t, window, p1, p2, mask_source, events)
        if inserted is not None:
            window.append((i, t, inserted))
    for idx, t, d in window:
        rs.tuples.append(t)
        rs.is_domi.append(np.asarray(d, dtype=U64).reshape(-1)[0])
        rs.source_rows.append(idx)
    return rs


def _log(events, row, cand, label, value):
    if events is not None:
        events.append(FetchEvent(row, cand, label, int(value)))


def _fetch_row_lookahead(sess, i, t, window, p1, p2, mask_source, events):
    s = len(window)
    if s == 0:
        return _const_bit(sess, 0), window
    cands = np.stack([w[1] for w in window])
    rows = np.broadcast_to(t, cands.shape)
    phi = obli_dom(sess, np.concatenate([cands, rows]), np.concatenate([rows, cands]), p1, p2)
    phi1, phi2 = phi[:s], phi[s:]
    masked = band(sess, phi1, _mask_shares(sess, s, mask_source))
    keep = list(window)
    removed = set()
    for j in range(s):
        v = open_bits(sess, masked[j : j + 1], "phi1_masked")[0]
        _log(events, i, window[j][0], "phi1_masked", v)
        if v == 1:
            return None, keep
        v = open_bits(sess, phi2[j : j + 1], "phi2")[0]
        _log(events, i, window[j][0], "phi2", v)
        if v == 1:
            removed.add(j)
    keep = [w for j, w in enumerate(window) if j not in removed]
    is_domi = or_reduce(sess, phi1)
    return np.atleast_1d(is_domi), keep


def _fetch_row_literal(sess, i, t, window, p1, p2, mask_source, events):
    window = list(window)
    acc = _const_bit(sess, 0)
    j = 0
    while j < len(window):
        cand_idx, cand, _ = window[j]
        phi1 = obli_dom(sess, cand[None, :], t[None, :], p1, p2)
        r = _mask_shares(sess, 1, mask_source)
        # acc OR phi1 and phi1 AND r in one round
        out = band(sess, np.concatenate([bnot(sess, acc), phi1]), np.concatenate([bnot(sess, phi1), r]))
        acc = bnot(sess, out[:1])
        v = open_bits(sess, out[1:], "phi1_masked")[0]
        _log(events, i, cand_idx, "phi1_masked", v)
        if v == 1:
            return None, window
        phi2 = obli_dom(sess, t[None, :], cand[None, :], p1, p2)
        v = open_bits(sess, phi2, "phi2")[0]
        _log(events, i, cand_idx, "phi2", v)
        if v == 1:
            del window[j]
            continue
        j += 1
    return acc, window


# --------------------------------------------------------------------------- pipeline


def run_query(
    sess: Session,
    db: np.ndarray,
    query: EncryptedQuery,
    *,
    mode: str = "lookahead",
    mask_source: str = "local",
    record_events: bool = False,
    gen_chunk: int | None = None,
) -> tuple[ResultSet, QueryStats]:
    """Shuffle, generate the sub-database, fetch the skyline; one server's side."""
    if query.party != sess.party:
        raise PartyMismatchError(f"query shares for party {query.party} given to party {sess.party}")
    db = np.asarray(db, dtype=U64)
    n, m = db.shape
    if query.m != m:
        raise ValueError(f"query has {query.m} dimensions, database has {m}")
    stats = QueryStats(n=n, m=m)
    r0, b0, r0_recv = sess.round, sess.bytes_sent, sess.bytes_recv
    t0 = time.perf_counter()
    shuffled = obli_shuff(sess, db)
    t1 = time.perf_counter()
    C, flags = obli_gen(sess, shuffled, query.lo, query.hi, chunk=gen_chunk)
    t2 = time.perf_counter()
    events = [] if record_events else None
    rs = obli_fetch(sess, C, query.p1, query.p2, mode=mode, mask_source=mask_source, events=events)
    t3 = time.perf_counter()
    stats.c_size = len(C)
    stats.s_size = len(rs)
    stats.rounds = sess.round - r0
    stats.bytes_sent = sess.bytes_sent - b0
    stats.bytes_recv = sess.bytes_recv - r0_recv
    stats.seconds = {"shuffle": t1 - t0, "gen": t2 - t1, "fetch": t3 - t2, "total": t3 - t0}
    stats.delta_hat = flags
    stats.events = events or []
    return rs, stats


__all__ = [
    "EncryptedQuery",
    "FetchEvent",
    "QueryStats",
    "ResultSet",
    "mask_bit",
    "obli_dom",
    "obli_fetch",
    "obli_gen",
    "run_query",
    "sec_leq",
]
