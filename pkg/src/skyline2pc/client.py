"""Data owner and query user: outsourcing, query encoding, result decoding."""

from __future__ import annotations

import csv
import json
import struct
import uuid
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, DomainError, PartyMismatchError, ProtocolError
from .oracle import PlainQuery
from .ring import RING64, U64, Ring
from .skyline import EncryptedQuery, ResultSet

DB_MAGIC = b"OBDB"
DB_VERSION = 1
_DB_HDR = struct.Struct("<4sBBBII")  # magic, version, party, l, n, m

# preference codes, first bit = "not selected", second bit = "prefer max"
PREF_CODES = {"min": (0, 0), "max": (0, 1), None: (1, 0)}


@dataclass
class PublicMetadata:
    n: int
    m: int
    l: int
    lower: list[int]
    upper: list[int]
    db_id: str

    def __post_init__(self) -> None:
        bound = 1 << (self.l - 2)
        if len(self.lower) != self.m or len(self.upper) != self.m:
            raise ValueError("need one lower and one upper bound per dimension")
        for i, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if not (0 <= lo <= hi < bound):
                raise DomainError(f"public bounds of dimension {i} ({lo}, {hi}) outside [0, {bound})")

    @classmethod
    def default(cls, n: int, m: int, ring: Ring = RING64, db_id: str | None = None) -> PublicMetadata:
        top = ring.value_bound - 1
        return cls(n, m, ring.bits, [0] * m, [top] * m, db_id or uuid.uuid4().hex)

    @property
    def ring(self) -> Ring:
        return Ring(self.l)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> PublicMetadata:
        try:
            d = json.loads(text)
            return cls(int(d["n"]), int(d["m"]), int(d["l"]), [int(v) for v in d["lower"]],
                       [int(v) for v in d["upper"]], str(d["db_id"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise CorruptFileError(f"bad metadata: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> PublicMetadata:
        return cls.from_json(Path(path).read_text())


# ------------------------------------------------------------------ database shares


@dataclass
class DatabaseShare:
    party: int
    data: np.ndarray  # (n, m) uint64
    ring: Ring = RING64

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def to_bytes(self) -> bytes:
        n, m = self.data.shape
        return _DB_HDR.pack(DB_MAGIC, DB_VERSION, self.party, self.ring.bits, n, m) + self.data.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, party: int | None = None) -> DatabaseShare:
        if len(buf) < _DB_HDR.size:
            raise CorruptFileError("share file truncated before header end")
        magic, version, p, l, n, m = _DB_HDR.unpack_from(buf)
        if magic != DB_MAGIC:
            raise CorruptFileError(f"bad share file magic {magic!r}")
        if version != DB_VERSION:
            raise CorruptFileError(f"unsupported share file version {version}")
        if p not in (1, 2):
            raise CorruptFileError(f"bad party byte {p}")
        if party is not None and p != party:
            raise PartyMismatchError(f"share file belongs to party {p}, expected {party}")
        if len(buf) != _DB_HDR.size + 8 * n * m:
            raise CorruptFileError(f"share file body is {len(buf) - _DB_HDR.size} bytes, expected {8 * n * m}")
        data = np.frombuffer(buf, "<u8", n * m, _DB_HDR.size).astype(U64).reshape(n, m)
        return cls(p, data, Ring(l))


def write_db_share(share: DatabaseShare, path) -> None:
    Path(path).write_bytes(share.to_bytes())


def read_db_share(path, party: int | None = None) -> DatabaseShare:
    return DatabaseShare.from_bytes(Path(path).read_bytes(), party)


def _as_table(db) -> np.ndarray:
    arr = np.asarray(db)
    if arr.ndim != 2:
        raise ValueError("database must be an n x m table")
    if arr.size and arr.dtype.kind not in "iu":
        raise DomainError(f"database values must be integers, got dtype {arr.dtype}")
    return arr


def validate_database(db, meta: PublicMetadata) -> np.ndarray:
    """Check every value against the public bounds; name the first offending cell."""
    arr = _as_table(db)
    if arr.shape[1] != meta.m:
        raise DomainError(f"database has {arr.shape[1]} columns, metadata says {meta.m}")
    lo = np.asarray(meta.lower, dtype=object)
    hi = np.asarray(meta.upper, dtype=object)
    if arr.size:
        wide = arr.astype(object)
        bad = (wide < lo) | (wide > hi)
        if bad.any():
            r, c = map(int, np.argwhere(bad)[0])
            raise DomainError(f"row {r}, column {c}: value {arr[r, c]} outside public bounds [{lo[c]}, {hi[c]}]")
    return arr.astype(U64)


def encrypt_database(db, rng: np.random.Generator, ring: Ring = RING64, meta: PublicMetadata | None = None,
                     db_id: str | None = None):
    """Split a plaintext table into two share files' contents plus its public metadata."""
    arr = _as_table(db)
    if meta is None:
        meta = PublicMetadata.default(arr.shape[0], arr.shape[1], ring, db_id)
    elif meta.n != arr.shape[0]:
        raise DomainError(f"database has {arr.shape[0]} rows, metadata says {meta.n}")
    values = validate_database(arr, meta)
    s1 = ring.random(rng, values.shape)
    s2 = ring.reduce(values - s1)
    return DatabaseShare(1, s1, ring), DatabaseShare(2, s2, ring), meta


def reconstruct_database(a: DatabaseShare, b: DatabaseShare) -> np.ndarray:
    if a.party == b.party:
        raise PartyMismatchError("both database shares belong to the same party")
    return a.ring.reduce(a.data + b.data)


# ------------------------------------------------------------------------- CSV I/O


def write_csv(path, db, names: list[str] | None = None) -> None:
    """``path`` may also be an open text stream."""
    arr = np.asarray(db)
    names = names or [f"d{i}" for i in range(arr.shape[1])]
    if hasattr(path, "write"):
        _write_rows(path, names, arr)
        return
    with open(path, "w", newline="") as fh:
        _write_rows(fh, names, arr)


def _write_rows(fh, names, arr) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(names)
    w.writerows(arr.tolist())


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Header row of dimension names, then one row of unsigned integers per tuple."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CorruptFileError(f"{path}: empty dataset file")
    names, body = rows[0], rows[1:]
    out = np.zeros((len(body), len(names)), dtype=U64)
    for r, row in enumerate(body):
        if len(row) != len(names):
            raise DomainError(f"row {r}: {len(row)} fields, header has {len(names)}")
        for c, cell in enumerate(row):
            try:
                v = int(cell)
            except ValueError:
                raise DomainError(f"row {r}, column {c}: {cell!r} is not an integer") from None
            if v < 0 or v >= 1 << 64:
                raise DomainError(f"row {r}, column {c}: value {v} is not an unsigned 64-bit integer")
            out[r, c] = v
    return names, out


# ------------------------------------------------------------------------- queries


@dataclass
class ExtendedQuery:
    """Plaintext region over all m dimensions plus the 2-bit code per dimension."""

    lo: np.ndarray
    hi: np.ndarray
    p1: np.ndarray
    p2: np.ndarray

    @property
    def m(self) -> int:
        return len(self.lo)


def build_query(q: PlainQuery, meta: PublicMetadata) -> ExtendedQuery:
    """Pad a query to every dimension: unselected ones take the public bounds."""
    bound = 1 << (meta.l - 2)
    lo = np.asarray(meta.lower, dtype=U64).copy()
    hi = np.asarray(meta.upper, dtype=U64).copy()
    codes = [PREF_CODES[None]] * meta.m
    for d, (a, b), pref in zip(q.dims, q.ranges, q.prefs):
        if not 0 <= d < meta.m:
            raise DomainError(f"selected dimension {d} outside [0, {meta.m})")
        if a > b:
            raise DomainError(f"inverted range ({a}, {b}) on dimension {d}")
        if a < 0 or b >= bound:
            raise DomainError(f"range ({a}, {b}) on dimension {d} outside the value domain [0, {bound})")
        lo[d], hi[d] = a, b
        codes[d] = PREF_CODES[pref]
    p1 = np.asarray([c[0] for c in codes], dtype=U64)
    p2 = np.asarray([c[1] for c in codes], dtype=U64)
    return ExtendedQuery(lo, hi, p1, p2)


def encrypt_query(ext: ExtendedQuery, rng: np.random.Generator, ring: Ring = RING64):
    """Fresh arithmetic shares of the region and XOR shares of the codes."""
    lo1 = ring.random(rng, ext.m)
    hi1 = ring.random(rng, ext.m)
    b1 = rng.integers(0, 2, size=ext.m, dtype=U64)
    b2 = rng.integers(0, 2, size=ext.m, dtype=U64)
    q1 = EncryptedQuery(1, lo1, hi1, b1, b2)
    q2 = EncryptedQuery(2, ring.reduce(ext.lo - lo1), ring.reduce(ext.hi - hi1), ext.p1 ^ b1, ext.p2 ^ b2)
    return q1, q2


def decrypt_query(q1: EncryptedQuery, q2: EncryptedQuery, ring: Ring = RING64) -> ExtendedQuery:
    if q1.party == q2.party:
        raise PartyMismatchError("both query shares belong to the same party")
    return ExtendedQuery(ring.reduce(q1.lo + q2.lo), ring.reduce(q1.hi + q2.hi), q1.p1 ^ q2.p1, q1.p2 ^ q2.p2)


# ------------------------------------------------------------------------- results


def decrypt_results(r1: ResultSet, r2: ResultSet, ring: Ring = RING64) -> list[tuple[tuple[int, ...], int]]:
    """All entries as (tuple, isDomi), in result order."""
    if r1.party == r2.party:
        raise PartyMismatchError("both result shares belong to the same party")
    if len(r1) != len(r2):
        raise ProtocolError(f"result sets disagree in length: {len(r1)} vs {len(r2)}")
    out = []
    for t1, t2, d1, d2 in zip(r1.tuples, r2.tuples, r1.is_domi, r2.is_domi):
        t = ring.reduce(np.asarray(t1, dtype=U64) + np.asarray(t2, dtype=U64))
        out.append((tuple(int(v) for v in t), int((U64(d1) ^ U64(d2)) & U64(1))))
    return out


def decrypt_and_filter(r1: ResultSet, r2: ResultSet, ring: Ring = RING64) -> list[tuple[int, ...]]:
    """The query answer: reconstructed entries whose isDomi flag is 0."""
    return [t for t, flag in decrypt_results(r1, r2, ring) if flag == 0]


def save_query(q: PlainQuery, path) -> None:
    doc = {"dims": list(q.dims), "ranges": [list(r) for r in q.ranges], "prefs": list(q.prefs)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_query(path) -> PlainQuery:
    try:
        doc = json.loads(Path(path).read_text())
        return PlainQuery(tuple(doc["dims"]), tuple(tuple(r) for r in doc["ranges"]), tuple(doc["prefs"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"bad query file {path}: {exc}") from exc
