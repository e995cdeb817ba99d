"""Length-prefixed frames over TCP sockets or an in-process queue pair.

Wire layout of one frame, all integers little-endian::

    u32 length      payload size in bytes (header not included)
    u8  msg_type    one of MsgType
    u64 session_id
    u32 round
    ... payload

Both channel kinds count every byte they put on the wire, header included,
and can inject a fixed one-way delivery delay.
"""

from __future__ import annotations

import heapq
import socket
import struct
import threading
import time
from dataclasses import dataclass
from enum import IntEnum

from .errors import ProtocolError, TransportError

HEADER = struct.Struct("<IBQI")
HEADER_SIZE = HEADER.size  # 17
MAX_PAYLOAD = 1 << 31


class MsgType(IntEnum):
    HANDSHAKE = 1
    CORR_SYNC = 2
    ENGINE_ROUND = 3
    SHUFFLE_Z2 = 4
    SHUFFLE_Z1 = 5
    OPEN_BATCH = 6
    CLIENT_UPLOAD = 7
    CLIENT_QUERY = 8
    CLIENT_RESULT = 9
    ERROR = 10


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    session_id: int
    round: int
    payload: bytes = b""

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)

    def encode(self) -> bytes:
        return HEADER.pack(len(self.payload), int(self.msg_type), self.session_id, self.round) + self.payload


def parse_header(buf: bytes) -> tuple[int, MsgType, int, int]:
    length, mtype, session_id, rnd = HEADER.unpack(buf)
    try:
        msg_type = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {mtype}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame payload of {length} bytes exceeds limit")
    return length, msg_type, session_id, rnd


def decode_frame(buf: bytes) -> Frame:
    if len(buf) < HEADER_SIZE:
        raise TransportError("truncated frame header")
    length, msg_type, sid, rnd = parse_header(buf[:HEADER_SIZE])
    payload = buf[HEADER_SIZE:]
    if len(payload) != length:
        raise TransportError(f"frame declares {length} payload bytes, got {len(payload)}")
    return Frame(msg_type, sid, rnd, bytes(payload))


@dataclass
class ChannelStats:
    bytes_sent: int = 0
    bytes_recv: int = 0
    frames_sent: int = 0
    frames_recv: int = 0
    log: list | None = None  # (direction, msg_type, round, wire_size) when recording

    def record(self, direction: str, frame: Frame) -> None:
        if direction == "send":
            self.bytes_sent += frame.wire_size
            self.frames_sent += 1
        else:
            self.bytes_recv += frame.wire_size
            self.frames_recv += 1
        if self.log is not None:
            self.log.append((direction, frame.msg_type, frame.round, frame.wire_size))


class Channel:
    """One endpoint of an ordered duplex frame stream."""

    def __init__(self, delay: float = 0.0, timeout: float | None = 60.0, record: bool = False):
        self.delay = delay
        self.timeout = timeout
        self.stats = ChannelStats(log=[] if record else None)

    def send_frame(self, frame: Frame) -> None:
        raise NotImplementedError

    def recv_frame(self) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()
_SPIN = 2e-4  # timed waits overshoot by ~0.1 ms; the final stretch of a delay is spun


def _sleep_until(t: float) -> None:
    left = t - time.monotonic()
    if left > _SPIN:
        time.sleep(left - _SPIN)
    while time.monotonic() < t:
        time.sleep(0)


class _DelayQueue:
    """FIFO whose items become visible only after their delivery time."""

    def __init__(self):
        self._cv = threading.Condition()
        self._items: list = []
        self._seq = 0

    def put(self, item, deliver_at: float) -> None:
        with self._cv:
            heapq.heappush(self._items, (deliver_at, self._seq, item))
            self._seq += 1
            self._cv.notify_all()

    def get(self, timeout: float | None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            with self._cv:
                now = time.monotonic()
                if self._items and self._items[0][0] <= now:
                    return heapq.heappop(self._items)[2]
                if deadline is not None and now >= deadline:
                    raise TransportError("receive timed out")
                wait = None if deadline is None else deadline - now
                head = self._items[0][0] - now if self._items else None
                if head is None or head > _SPIN:
                    if head is not None:
                        wait = head - _SPIN if wait is None else min(wait, head - _SPIN)
                    self._cv.wait(wait)
                    continue
            time.sleep(0)  # last fraction of the delay: yield instead of oversleeping


class InMemoryChannel(Channel):
    def __init__(self, inbox: _DelayQueue, outbox: _DelayQueue, **kw):
        super().__init__(**kw)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send_frame(self, frame: Frame) -> None:
        if self._closed:
            raise TransportError("send on closed channel")
        # serialized form is what a socket would carry; keep the accounting identical
        data = frame.encode()
        self.stats.record("send", frame)
        self._outbox.put(data, time.monotonic() + self.delay)

    def recv_frame(self) -> Frame:
        item = self._inbox.get(self.timeout)
        if item is _CLOSED:
            self._inbox.put(_CLOSED, 0.0)
            raise TransportError("peer closed the channel")
        frame = decode_frame(item)
        self.stats.record("recv", frame)
        return frame

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED, time.monotonic() + self.delay)


def inmem_transport_pair(delay: float = 0.0, timeout: float | None = 60.0, record: bool = False):
    """Two connected in-process endpoints; ``delay`` is the one-way latency in seconds."""
    a_to_b, b_to_a = _DelayQueue(), _DelayQueue()
    a = InMemoryChannel(b_to_a, a_to_b, delay=delay, timeout=timeout, record=record)
    b = InMemoryChannel(a_to_b, b_to_a, delay=delay, timeout=timeout, record=record)
    return a, b


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        try:
            k = sock.recv_into(view[got:], n - got)
        except socket.timeout:
            raise TransportError("receive timed out") from None
        except OSError as exc:
            raise TransportError(f"socket error: {exc}") from exc
        if k == 0:
            if got == 0 and n == HEADER_SIZE:
                raise TransportError("connection closed")
            raise TransportError(f"connection closed mid-frame ({got}/{n} bytes)")
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame:
    length, msg_type, sid, rnd = parse_header(_recv_exact(sock, HEADER_SIZE))
    payload = _recv_exact(sock, length) if length else b""
    return Frame(msg_type, sid, rnd, payload)


class SocketChannel(Channel):
    """Frame channel over a connected TCP socket.

    With a nonzero ``delay`` the channel sleeps before each send, which models
    one-way link latency the same way the in-memory pair does.
    """

    def __init__(self, sock: socket.socket, **kw):
        super().__init__(**kw)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(self.timeout)
        self._send_lock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, connect_timeout: float = 10.0, **kw) -> SocketChannel:
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        return cls(sock, **kw)

    def send_frame(self, frame: Frame) -> None:
        data = frame.encode()
        if self.delay:
            _sleep_until(time.monotonic() + self.delay)
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc
        self.stats.record("send", frame)

    def recv_frame(self) -> Frame:
        frame = read_frame(self.sock)
        self.stats.record("recv", frame)
        return frame

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def send_frame(chan: Channel, frame: Frame) -> None:
    chan.send_frame(frame)


def recv_frame(chan: Channel) -> Frame:
    return chan.recv_frame()


def socket_pair(**kw) -> tuple[SocketChannel, SocketChannel]:
    """Two SocketChannels joined over real loopback TCP."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    port = srv.getsockname()[1]
    result: dict = {}

    def _accept():
        conn, _ = srv.accept()
        result["conn"] = conn

    t = threading.Thread(target=_accept)
    t.start()
    client = socket.create_connection(("127.0.0.1", port))
    t.join()
    srv.close()
    return SocketChannel(client, **kw), SocketChannel(result["conn"], **kw)


__all__ = [
    "HEADER_SIZE",
    "Channel",
    "Frame",
    "InMemoryChannel",
    "MsgType",
    "SocketChannel",
    "decode_frame",
    "inmem_transport_pair",
    "read_frame",
    "recv_frame",
    "send_frame",
    "socket_pair",
]
