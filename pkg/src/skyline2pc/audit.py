"""Transcript scanner: what crossed the wire during a query, and was it allowed.

A query run may only reconstruct the per-row region bits, the masked dominance
bits, the reverse dominance bits, and the one-time-padded differences of the
multiplication and AND gates.  The shuffle's two matrices travel one way under
fresh masks and are never reconstructed.  Anything else is a violation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .engine import Session
from .transport import HEADER_SIZE, MsgType

QUERY_OPEN_LABELS = frozenset({"delta_hat", "phi1_masked", "phi2", "beaver_mask", "and_mask"})
BIT_LABELS = frozenset({"delta_hat", "phi1_masked", "phi2"})
LABEL_TYPES = {
    "delta_hat": MsgType.OPEN_BATCH,
    "phi1_masked": MsgType.OPEN_BATCH,
    "phi2": MsgType.OPEN_BATCH,
    "open": MsgType.OPEN_BATCH,
    "beaver_mask": MsgType.ENGINE_ROUND,
    "and_mask": MsgType.ENGINE_ROUND,
    "shuffle_z2": MsgType.SHUFFLE_Z2,
    "shuffle_z1": MsgType.SHUFFLE_Z1,
}


@dataclass
class AuditReport:
    violations: list[str] = field(default_factory=list)
    label_counts: Counter = field(default_factory=Counter)
    opened_bits: dict = field(default_factory=dict)  # label -> number of plaintext bits opened

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        head = "clean" if self.ok else f"{len(self.violations)} violation(s)"
        counts = ", ".join(f"{k}={v}" for k, v in sorted(self.label_counts.items()))
        return f"transcript {head}: {counts}" + "".join(f"\n  - {v}" for v in self.violations)


def audit_session(sess: Session, allowed=QUERY_OPEN_LABELS, n_rows: int | None = None) -> AuditReport:
    """Scan one party's transcript against the allowed-label set and its channel's counters.

    Opened values are only checked when the session recorded them
    (``record_openings=True``).  ``n_rows``, when given, is the number of
    region bits the run must open (one per database row).
    """
    rep = AuditReport()
    shuffle_seen = 0
    for i, e in enumerate(sess.transcript):
        rep.label_counts[e.label] += 1
        if e.label in LABEL_TYPES and LABEL_TYPES[e.label] != e.msg_type:
            rep.violations.append(f"entry {i}: label {e.label} carried by {e.msg_type.name}")
        if e.label in ("shuffle_z2", "shuffle_z1"):
            shuffle_seen += 1
            continue
        if e.label not in allowed:
            rep.violations.append(f"entry {i} (round {e.round}): disallowed opening {e.label!r}")
            continue
        if e.direction == "recv" and e.label in BIT_LABELS:
            nbits = e.nbytes - HEADER_SIZE
            rep.opened_bits[e.label] = rep.opened_bits.get(e.label, 0) + nbits
            if e.values is not None:
                vals = np.asarray(e.values)
                if vals.size != nbits:
                    rep.violations.append(f"entry {i}: {vals.size} values opened in a {nbits}-byte frame")
                if np.any(vals > 1):
                    rep.violations.append(f"entry {i}: {e.label} opening is not a bit vector")
    if shuffle_seen not in (0, 2):
        rep.violations.append(f"{shuffle_seen} shuffle messages, expected exactly one each way")
    if n_rows is not None and rep.opened_bits.get("delta_hat", 0) != n_rows:
        rep.violations.append(f"{rep.opened_bits.get('delta_hat', 0)} region bits opened for {n_rows} rows")
    _check_accounting(sess, rep)
    return rep


def _check_accounting(sess: Session, rep: AuditReport) -> None:
    sent = [e for e in sess.transcript if e.direction == "send"]
    recv = [e for e in sess.transcript if e.direction == "recv"]
    if sum(e.nbytes for e in sent) != sess.bytes_sent or sum(e.nbytes for e in recv) != sess.bytes_recv:
        rep.violations.append("transcript byte totals differ from the session counters")
    stats = getattr(sess.channel, "stats", None)
    if stats is None:
        return
    if stats.frames_sent != len(sent) or stats.bytes_sent != sess.bytes_sent:
        rep.violations.append(
            f"channel sent {stats.frames_sent} frames / {stats.bytes_sent} bytes, "
            f"transcript has {len(sent)} / {sess.bytes_sent}"
        )
    if stats.frames_recv != len(recv) or stats.bytes_recv != sess.bytes_recv:
        rep.violations.append(
            f"channel received {stats.frames_recv} frames / {stats.bytes_recv} bytes, "
            f"transcript has {len(recv)} / {sess.bytes_recv}"
        )
    if stats.log is not None:
        wire = [(d, t, r) for d, t, r, _ in stats.log]
        ours = [(e.direction, e.msg_type, e.round) for e in sess.transcript]
        if wire != ours:
            rep.violations.append("channel frame log does not match the transcript order")
