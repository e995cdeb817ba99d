"""Exception hierarchy shared by every layer of the package."""


class Skyline2PCError(Exception):
    """Base class for all errors raised by this package."""


class ProtocolError(Skyline2PCError):
    """A party observed something the protocol does not allow."""


class DesyncError(ProtocolError):
    """The two parties are no longer executing the same operation sequence."""


class PeerAbortedError(ProtocolError):
    """The peer reported an error and abandoned the session."""


class PartyMismatchError(ProtocolError):
    """Shares or files were combined across the wrong party roles."""


class BudgetExhaustedError(Skyline2PCError):
    """A correlation pool ran out of material of some kind."""

    def __init__(self, kind: str, requested: int, available: int, consumed: dict | None = None):
        self.kind = kind
        self.requested = requested
        self.available = available
        self.consumed = dict(consumed or {})
        super().__init__(
            f"correlation budget exhausted for {kind!r}: requested {requested}, "
            f"{available} left (consumed so far: {self.consumed})"
        )


class CorrelationReuseError(ProtocolError):
    """A single-use correlation was presented a second time."""


class CorruptFileError(Skyline2PCError):
    """A binary share or correlation file failed validation."""


class DomainError(Skyline2PCError, ValueError):
    """A plaintext value lies outside the comparison-safe domain."""


class TransportError(Skyline2PCError):
    """The underlying byte stream failed or closed mid-frame."""


class CalibrationError(Skyline2PCError):
    """Query generation could not reach the requested selectivity."""


class ConfigError(Skyline2PCError):
    """Missing or inconsistent daemon configuration; fatal at startup."""


class OracleMismatchError(Skyline2PCError):
    """An encrypted-path answer disagreed with the plaintext skyline."""
