"""Two-server oblivious user-defined skyline queries over secret-shared data."""

from .errors import (
    BudgetExhaustedError,
    CalibrationError,
    CorruptFileError,
    DesyncError,
    DomainError,
    PartyMismatchError,
    PeerAbortedError,
    ProtocolError,
    Skyline2PCError,
    TransportError,
)
from .oracle import PlainQuery, bnl_skyline, brute_skyline, dominates
from .ring import RING8, RING64, Ring

__version__ = "0.1.0"

__all__ = [
    "RING8",
    "RING64",
    "BudgetExhaustedError",
    "CalibrationError",
    "CorruptFileError",
    "DesyncError",
    "DomainError",
    "PartyMismatchError",
    "PeerAbortedError",
    "PlainQuery",
    "ProtocolError",
    "Ring",
    "Skyline2PCError",
    "TransportError",
    "bnl_skyline",
    "brute_skyline",
    "dominates",
]
