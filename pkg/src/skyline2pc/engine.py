"""Two-party interactive layer over additive and XOR shares.

Each party runs the same code against its own :class:`Session`; every public
function here is called by both parties with their own shares and returns that
party's share of the result.  Interaction happens in *rounds*: both parties send
one frame and then receive the peer's frame, so a round costs one link delay.

Binary values come in two flavours: single bits (0/1 in a ``uint64``) and
ring-width words used inside the MSB-extraction adder.  The ``width`` argument
of the binary gates selects between them.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .dealer import CorrelationSource
from .errors import DesyncError, PeerAbortedError, TransportError
from .ring import RING64, U64, Ring
from .transport import Channel, Frame, MsgType

# labels a reconstructed (opened) value may carry on the wire
OPEN_LABELS = frozenset({"delta_hat", "phi1_masked", "phi2", "beaver_mask", "and_mask", "open"})
# one-way masked matrices of the shuffle; these are never reconstructed
SHUFFLE_LABELS = frozenset({"shuffle_z2", "shuffle_z1"})
ONE = U64(1)


@dataclass
class TranscriptEntry:
    round: int
    direction: str
    msg_type: MsgType
    label: str
    nbytes: int
    values: np.ndarray | None = None  # plaintext result of an opening, when recorded


@dataclass
class Session:
    """Per-party protocol state: transport, correlation cursors, counters."""

    party: int
    channel: Channel
    corr: CorrelationSource | None = None
    ring: Ring = RING64
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    session_id: int = 0
    record_openings: bool = False

    def __post_init__(self) -> None:
        if self.party not in (1, 2):
            raise ValueError("party must be 1 or 2")
        self.round = 0
        self.bytes_sent = 0
        self.bytes_recv = 0
        self.transcript: list[TranscriptEntry] = []
        self.aborted = False

    # -- framing -----------------------------------------------------------------

    def _check_label(self, label: str) -> None:
        if label not in OPEN_LABELS and label not in SHUFFLE_LABELS:
            raise ValueError(f"unregistered transcript label {label!r}")

    def send(self, msg_type: MsgType, payload: bytes, label: str) -> None:
        self._check_label(label)
        frame = Frame(msg_type, self.session_id, self.round, payload)
        self.channel.send_frame(frame)
        self.bytes_sent += frame.wire_size
        self.transcript.append(TranscriptEntry(self.round, "send", msg_type, label, frame.wire_size))

    def recv(self, msg_type: MsgType, label: str) -> bytes:
        frame = self.channel.recv_frame()
        self.bytes_recv += frame.wire_size
        if frame.msg_type == MsgType.ERROR:
            self.aborted = True
            raise PeerAbortedError(f"peer aborted: {frame.payload.decode(errors='replace')}")
        if frame.session_id != self.session_id or frame.round != self.round or frame.msg_type != msg_type:
            self._abort(
                f"desync at round {self.round}: expected ({self.session_id}, {self.round}, {msg_type.name}), "
                f"got ({frame.session_id}, {frame.round}, {frame.msg_type.name})"
            )
        self.transcript.append(TranscriptEntry(self.round, "recv", msg_type, label, frame.wire_size))
        return frame.payload

    def _abort(self, reason: str):
        self.aborted = True
        self.notify_abort(reason)
        raise DesyncError(reason)

    def notify_abort(self, reason: str) -> None:
        """Best-effort ERROR frame so the peer fails fast instead of timing out."""
        try:
            self.channel.send_frame(Frame(MsgType.ERROR, self.session_id, self.round, reason.encode()[:512]))
        except (TransportError, OSError):
            pass

    def exchange(self, msg_type: MsgType, payload: bytes, label: str) -> bytes:
        """One symmetric round: send our frame, receive the peer's frame of equal length."""
        self.send(msg_type, payload, label)
        peer = self.recv(msg_type, label)
        if len(peer) != len(payload):
            self._abort(f"batch length mismatch at round {self.round}: sent {len(payload)} bytes, got {len(peer)}")
        self.round += 1
        return peer

    def send_oneway(self, msg_type: MsgType, payload: bytes, label: str) -> None:
        self.send(msg_type, payload, label)
        self.round += 1

    def recv_oneway(self, msg_type: MsgType, label: str) -> bytes:
        payload = self.recv(msg_type, label)
        self.round += 1
        return payload

    def _note_opened(self, values: np.ndarray) -> None:
        if self.record_openings:
            self.transcript[-1].values = values.copy()

    @property
    def counters(self) -> dict:
        return {"rounds": self.round, "bytes_sent": self.bytes_sent, "bytes_recv": self.bytes_recv}


# ------------------------------------------------------------------------ encoding


def _encode_words(x: np.ndarray, width: int) -> bytes:
    if width == 1:
        return x.astype(np.uint8).tobytes()
    return x.astype(f"<u{width // 8}", copy=False).tobytes()


def _decode_words(buf: bytes, width: int) -> np.ndarray:
    if width == 1:
        return np.frombuffer(buf, dtype=np.uint8).astype(U64)
    return np.frombuffer(buf, dtype=f"<u{width // 8}").astype(U64, copy=False)


# ------------------------------------------------------------------------ openings


def open_arith(sess: Session, x, label: str = "open") -> np.ndarray:
    x = sess.ring.reduce(np.asarray(x, dtype=U64))
    peer = sess.exchange(MsgType.OPEN_BATCH, x.astype("<u8").tobytes(), label)
    out = sess.ring.reduce(x + np.frombuffer(peer, dtype="<u8").astype(U64).reshape(x.shape))
    sess._note_opened(out)
    return out


def open_bits(sess: Session, b, label: str = "open") -> np.ndarray:
    b = np.asarray(b, dtype=U64) & ONE
    peer = sess.exchange(MsgType.OPEN_BATCH, _encode_words(b.ravel(), 1), label)
    out = b ^ _decode_words(peer, 1).reshape(b.shape)
    sess._note_opened(out)
    return out


# ------------------------------------------------------------------- arithmetic


def mul(sess: Session, x, y) -> np.ndarray:
    """Beaver multiplication, one round for the whole batch."""
    ring = sess.ring
    x = np.asarray(x, dtype=U64)
    y = np.asarray(y, dtype=U64)
    shape = np.broadcast(x, y).shape
    x = np.broadcast_to(x, shape).ravel()
    y = np.broadcast_to(y, shape).ravel()
    u, v, w = sess.corr.beaver(x.size)
    e_i = ring.reduce(x - u)
    f_i = ring.reduce(y - v)
    peer = sess.exchange(MsgType.ENGINE_ROUND, np.concatenate([e_i, f_i]).astype("<u8").tobytes(), "beaver_mask")
    pe = np.frombuffer(peer, dtype="<u8").astype(U64)
    e = ring.reduce(e_i + pe[: x.size])
    f = ring.reduce(f_i + pe[x.size :])
    z = f * u + e * v + w
    if sess.party == 1:
        z = z + e * f
    return ring.reduce(z).reshape(shape)


# ----------------------------------------------------------------------- binary


def _width_mask(width: int) -> np.uint64:
    return U64((1 << width) - 1)


def band(sess: Session, x, y, width: int = 1) -> np.ndarray:
    """Batched AND over XOR shares using one dealer AND triple per element."""
    x = np.asarray(x, dtype=U64)
    y = np.asarray(y, dtype=U64)
    shape = np.broadcast(x, y).shape
    xf = np.broadcast_to(x, shape).ravel()
    yf = np.broadcast_to(y, shape).ravel()
    k = xf.size
    if k == 0:
        return np.zeros(shape, dtype=U64)
    u, v, w = sess.corr.and_triples(k, width)
    e_i = xf ^ u
    f_i = yf ^ v
    peer = _decode_words(sess.exchange(MsgType.ENGINE_ROUND, _encode_words(np.concatenate([e_i, f_i]), width), "and_mask"), width)
    e = e_i ^ peer[:k]
    f = f_i ^ peer[k:]
    z = (e & v) ^ (f & u) ^ w
    if sess.party == 1:
        z ^= e & f
    return z.reshape(shape)


def bxor(x, y) -> np.ndarray:
    return np.asarray(x, dtype=U64) ^ np.asarray(y, dtype=U64)


def bnot(sess: Session, x, width: int = 1) -> np.ndarray:
    x = np.asarray(x, dtype=U64)
    if sess.party == 1:
        return x ^ _width_mask(width)
    return x.copy()


def bor(sess: Session, x, y) -> np.ndarray:
    return bnot(sess, band(sess, bnot(sess, x), bnot(sess, y)))


def and_reduce(sess: Session, x) -> np.ndarray:
    """AND over the last axis with a log-depth tree (one round per level)."""
    x = np.asarray(x, dtype=U64)
    while x.shape[-1] > 1:
        half = x.shape[-1] // 2
        paired = band(sess, x[..., :half], x[..., half : 2 * half])
        x = np.concatenate([paired, x[..., 2 * half :]], axis=-1)
    return x[..., 0]


def or_reduce(sess: Session, x) -> np.ndarray:
    return bnot(sess, and_reduce(sess, bnot(sess, x)))


# ------------------------------------------------------------------- comparison


def sec_ext(sess: Session, a, b) -> np.ndarray:
    """Shared MSB of (a - b) mod 2^l.

    Each party's arithmetic share of d = a - b is treated as that party's private
    l-bit input; a Kogge-Stone carry tree over XOR shares adds the two inputs and
    only the top sum bit is kept.  Costs 1 + ceil(log2(l-1)) AND rounds.
    """
    ring = sess.ring
    l = ring.bits
    mask = ring.mask
    d = ring.reduce(np.asarray(a, dtype=U64) - np.asarray(b, dtype=U64))
    shape = d.shape
    d = d.ravel()
    zero = np.zeros_like(d)
    # x is party 1's input, y is party 2's input, both as XOR sharings
    x, y = (d, zero) if sess.party == 1 else (zero, d)
    g = band(sess, x, y, width=l)
    p = x ^ y
    G, P = g, p
    s = 1
    while s < l - 1:
        Gs = (G << U64(s)) & mask
        if 2 * s >= l - 1:
            G = G ^ band(sess, P, Gs, width=l)
        else:
            Ps = (P << U64(s)) & mask
            both = band(sess, np.concatenate([P, P]), np.concatenate([Gs, Ps]), width=l)
            G = G ^ both[: d.size]
            P = both[d.size :]
        s *= 2
    carry_in = (G << ONE) & mask
    return ((p ^ carry_in) >> U64(l - 1)).reshape(shape) & ONE


def sec_leq(sess: Session, a, b) -> np.ndarray:
    """Shared bit of a <= b, computed as NOT sec_ext(b, a)."""
    return bnot(sess, sec_ext(sess, b, a))


# ------------------------------------------------------------------- execution


def run_pair(fn1, fn2=None, *, channels=None, timeout: float | None = 120.0):
    """Run ``fn1(chan1)`` and ``fn2(chan2)`` in two threads over a channel pair.

    Returns ``(result1, result2)``.  If either side raises, both channels are
    closed so the other side unblocks, and the first original error is re-raised.
    """
    from .transport import inmem_transport_pair

    fn2 = fn1 if fn2 is None else fn2
    c1, c2 = channels if channels is not None else inmem_transport_pair()
    results: list = [None, None]
    errors: list = [None, None]

    def target(i, fn, chan, other):
        try:
            results[i] = fn(chan)
        except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
            errors[i] = exc
            chan.close()
            other.close()

    threads = [
        threading.Thread(target=target, args=(0, fn1, c1, c2), daemon=True),
        threading.Thread(target=target, args=(1, fn2, c2, c1), daemon=True),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
        if t.is_alive():
            c1.close()
            c2.close()
            raise TransportError("two-party run timed out")
    primary = [e for e in errors if e is not None and not isinstance(e, (TransportError, PeerAbortedError))]
    if primary:
        raise primary[0]
    if any(errors):
        raise next(e for e in errors if e is not None)
    return results[0], results[1]


def run_sessions(body, corr1, corr2, *, ring: Ring = RING64, seed: int | None = None, delay: float = 0.0,
                 record: bool = False, record_openings: bool = False, channels=None):
    """Convenience wrapper: build one Session per party and run ``body(sess)`` on both.

    Returns ``((result1, sess1), (result2, sess2))``.
    """
    from .transport import inmem_transport_pair

    if channels is None:
        channels = inmem_transport_pair(delay=delay, record=record)
    seeds = np.random.SeedSequence(seed).spawn(2)

    def make(party, corr):
        def fn(chan):
            sess = Session(party, chan, corr, ring, np.random.default_rng(seeds[party - 1]),
                           record_openings=record_openings)
            return body(sess), sess

        return fn

    return run_pair(make(1, corr1), make(2, corr2), channels=channels)
