"""Modular ring Z_{2^l}, additive shares over it, and the binary (XOR) domain.

Shares are numpy ``uint64`` arrays; arithmetic wraps natively for l=64 and is
masked for narrower test rings.  Every function here is local to one party:
nothing in this module talks to the network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DomainError, PartyMismatchError

U64 = np.uint64
PARTIES = (1, 2)


@dataclass(frozen=True)
class Ring:
    """The ring Z_{2^bits}.  ``bits`` must be a multiple of 8 no larger than 64."""

    bits: int = 64

    def __post_init__(self) -> None:
        if self.bits not in (8, 16, 32, 64):
            raise ValueError(f"unsupported ring width {self.bits}")

    @property
    def modulus(self) -> int:
        return 1 << self.bits

    @property
    def mask(self) -> np.uint64:
        return U64(self.modulus - 1)

    @property
    def value_bound(self) -> int:
        """Exclusive upper bound of the comparison-safe plaintext domain, 2^(l-2)."""
        return 1 << (self.bits - 2)

    @property
    def word_dtype(self) -> np.dtype:
        return np.dtype(f"<u{self.bits // 8}")

    def reduce(self, x) -> np.ndarray:
        arr = np.asarray(x, dtype=U64)
        if self.bits == 64:
            return arr
        return arr & self.mask

    def random(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        return rng.integers(0, self.modulus, size=shape, dtype=U64)

    def msb(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=U64) >> U64(self.bits - 1)) & U64(1)

    def check_domain(self, x, what: str = "value") -> np.ndarray:
        arr = np.asarray(x)
        if arr.size and (arr.min() < 0 or int(arr.max()) >= self.value_bound):
            raise DomainError(f"{what} outside [0, 2^{self.bits - 2})")
        return arr.astype(U64)


RING64 = Ring(64)
RING8 = Ring(8)


def _as_u64(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(U64, copy=False)
    return np.asarray(x, dtype=U64)


@dataclass(frozen=True)
class ArithShare:
    """One party's additive share(s) of ring value(s)."""

    share: np.ndarray
    party: int
    ring: Ring = RING64

    def __post_init__(self) -> None:
        if self.party not in PARTIES:
            raise ValueError(f"party must be 1 or 2, got {self.party}")
        object.__setattr__(self, "share", self.ring.reduce(_as_u64(self.share)))

    def _check(self, other: ArithShare) -> None:
        if other.party != self.party:
            raise PartyMismatchError("local operation mixes shares of different parties")
        if other.ring != self.ring:
            raise ValueError("ring mismatch")

    def __add__(self, other: ArithShare) -> ArithShare:
        self._check(other)
        return ArithShare(self.share + other.share, self.party, self.ring)

    def __sub__(self, other: ArithShare) -> ArithShare:
        self._check(other)
        return ArithShare(self.share - other.share, self.party, self.ring)


@dataclass(frozen=True)
class BitShare:
    """One party's XOR share(s) of bit(s), stored as 0/1 ``uint64``."""

    share: np.ndarray
    party: int

    def __post_init__(self) -> None:
        if self.party not in PARTIES:
            raise ValueError(f"party must be 1 or 2, got {self.party}")
        object.__setattr__(self, "share", _as_u64(self.share) & U64(1))

    def __xor__(self, other: BitShare) -> BitShare:
        if other.party != self.party:
            raise PartyMismatchError("local XOR mixes shares of different parties")
        return BitShare(self.share ^ other.share, self.party)

    def __invert__(self) -> BitShare:
        return not_bit(self)


def share_arith(x, rng: np.random.Generator, ring: Ring = RING64, first=None) -> tuple[ArithShare, ArithShare]:
    """Split ``x`` into two additive shares; ``first`` forces party 1's share."""
    x = ring.reduce(_as_u64(x))
    s1 = ring.random(rng, x.shape) if first is None else ring.reduce(_as_u64(first))
    s2 = ring.reduce(x - s1)
    return ArithShare(s1, 1, ring), ArithShare(s2, 2, ring)


def reconstruct_arith(s1: ArithShare, s2: ArithShare) -> np.ndarray:
    if s1.party == s2.party:
        raise PartyMismatchError(f"both shares claim party {s1.party}")
    if s1.ring != s2.ring:
        raise ValueError("ring mismatch")
    return s1.ring.reduce(s1.share + s2.share)


def share_bits(b, rng: np.random.Generator, first=None) -> tuple[BitShare, BitShare]:
    b = _as_u64(b) & U64(1)
    s1 = rng.integers(0, 2, size=b.shape, dtype=U64) if first is None else _as_u64(first) & U64(1)
    return BitShare(s1, 1), BitShare(b ^ s1, 2)


def reconstruct_bits(s1: BitShare, s2: BitShare) -> np.ndarray:
    if s1.party == s2.party:
        raise PartyMismatchError(f"both shares claim party {s1.party}")
    return s1.share ^ s2.share


def not_bit(b: BitShare) -> BitShare:
    # party 1 flips, party 2 keeps
    if b.party == 1:
        return BitShare(b.share ^ U64(1), 1)
    return b


LinearOp = Literal["add", "sub", "const_mul", "const_add"]


def local_linear(op: LinearOp, x: ArithShare, y: ArithShare | int | None = None) -> ArithShare:
    """Non-interactive linear operations on one party's arithmetic shares.

    ``add``/``sub`` take a second share; ``const_mul``/``const_add`` take a public
    integer.  A public constant is added by party 1 only.
    """
    if op == "add":
        return x + y
    if op == "sub":
        return x - y
    c = U64(int(y) % x.ring.modulus)
    if op == "const_mul":
        return ArithShare(x.share * c, x.party, x.ring)
    if op == "const_add":
        if x.party == 1:
            return ArithShare(x.share + c, 1, x.ring)
        return x
    raise ValueError(f"unknown linear op {op!r}")


def encode_ring(values) -> bytes:
    """RingValue wire encoding: 8-byte little-endian per element."""
    return np.ascontiguousarray(values, dtype="<u8").tobytes()


def decode_ring(buf: bytes, count: int | None = None) -> np.ndarray:
    arr = np.frombuffer(buf, dtype="<u8", count=-1 if count is None else count)
    return arr.astype(U64)


def encode_bits(bits) -> bytes:
    """BitShare wire encoding: one byte (0 or 1) per element."""
    return np.ascontiguousarray(bits, dtype=np.uint8).tobytes()


def decode_bits(buf: bytes) -> np.ndarray:
    return np.frombuffer(buf, dtype=np.uint8).astype(U64)
