"""Server daemons for the two computing parties, and the matching client calls.

Topology: each server listens for clients; CS1 also listens for the peer link
and CS2 dials it.  A client uploads its query shares to both servers under one
query id, then asks both to run it.  CS1 leads: it announces each query id on
the peer link and CS2 joins once its own upload for that id has arrived.  Only
then do both start the lock-step protocol, with the query id as session id.

Client-facing frames::

    CLIENT_UPLOAD  session=query id, payload = EncryptedQuery bytes
    CLIENT_QUERY   session=query id, empty payload
    CLIENT_RESULT  session=query id, payload = u32 len | stats JSON | ResultSet bytes
    ERROR          session=query id, payload = UTF-8 message
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .client import read_db_share
from .dealer import PartyCorrelations, read_correlations
from .engine import Session
from .errors import ConfigError, ProtocolError, Skyline2PCError, TransportError
from .skyline import EncryptedQuery, ResultSet, run_query
from .transport import Frame, MsgType, SocketChannel

log = logging.getLogger(__name__)

_LEN = struct.Struct("<I")


def parse_addr(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or default_host, int(port)
    except ValueError:
        raise ConfigError(f"bad address {text!r}, expected host:port") from None


@dataclass
class ServerConfig:
    party: int
    db_path: str
    corr_path: str
    listen: tuple[str, int] = ("127.0.0.1", 0)
    peer: tuple[str, int] = ("127.0.0.1", 0)  # CS1: where to accept the peer; CS2: where to dial it
    delay: float = 0.0
    timeout: float = 60.0
    state_path: str | None = None  # remembers spent correlation material across restarts
    seed: int | None = None


@dataclass
class _Job:
    qid: int
    query: EncryptedQuery | None = None
    requested: bool = False
    done: threading.Event = field(default_factory=threading.Event)
    payload: bytes = b""
    error: str | None = None


def encode_result(rs: ResultSet, stats: dict) -> bytes:
    meta = json.dumps(stats).encode()
    return _LEN.pack(len(meta)) + meta + rs.to_bytes()


def decode_result(buf: bytes) -> tuple[ResultSet, dict]:
    if len(buf) < _LEN.size:
        raise ProtocolError("result frame truncated")
    (k,) = _LEN.unpack_from(buf)
    stats = json.loads(buf[_LEN.size : _LEN.size + k])
    return ResultSet.from_bytes(buf[_LEN.size + k :]), stats


class SkylineServer:
    """One computing party.  ``start()`` binds sockets and returns immediately."""

    def __init__(self, config: ServerConfig):
        if config.party not in (1, 2):
            raise ConfigError("role must be CS1 or CS2")
        self.config = config
        self.party = config.party
        try:
            share = read_db_share(config.db_path, config.party)
            self.corr: PartyCorrelations = read_correlations(config.corr_path, config.party)
        except FileNotFoundError as exc:
            raise ConfigError(f"missing file: {exc.filename}") from exc
        except Skyline2PCError as exc:
            raise ConfigError(f"cannot load party {config.party} files: {exc}") from exc
        self.db = share.data
        self.ring = share.ring
        if self.corr.ring != self.ring or (self.corr.n, self.corr.m) != self.db.shape:
            raise ConfigError(
                f"correlation file is for {self.corr.n}x{self.corr.m} l={self.corr.ring.bits}, "
                f"database share is {self.db.shape[0]}x{self.db.shape[1]} l={self.ring.bits}"
            )
        if config.state_path and Path(config.state_path).exists():
            self.corr.seek(json.loads(Path(config.state_path).read_text()))
        self.rng = np.random.default_rng(config.seed)
        self.fatal: str | None = None
        self.queries_run = 0
        self._jobs: dict[int, _Job] = {}
        self._cv = threading.Condition()
        self._leader_q: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._client_sock: socket.socket | None = None
        self._peer_sock: socket.socket | None = None
        self._peer_chan: SocketChannel | None = None

    # ------------------------------------------------------------------ lifecycle

    def start(self) -> SkylineServer:
        self._client_sock = _listen(self.config.listen)
        self._client_addr = self._client_sock.getsockname()[:2]
        if self.party == 1:
            self._peer_sock = _listen(self.config.peer)
            self._peer_addr = self._peer_sock.getsockname()[:2]
        self._spawn(self._accept_clients)
        self._spawn(self._peer_loop)
        return self

    @property
    def client_addr(self) -> tuple[str, int]:
        return self._client_addr

    @property
    def peer_addr(self) -> tuple[str, int]:
        if self._peer_sock is None:
            raise ConfigError("only CS1 listens for the peer")
        return self._peer_addr

    def stop(self) -> None:
        self._stop.set()
        for s in (self._client_sock, self._peer_sock):
            if s is not None:
                try:
                    s.shutdown(socket.SHUT_RDWR)  # wakes a thread blocked in accept()
                except OSError:
                    pass
                s.close()
        if self._peer_chan is not None:
            self._peer_chan.close()
        self._leader_q.put(None)
        with self._cv:
            self._cv.notify_all()
        for t in self._threads:
            t.join(5)

    def serve_forever(self) -> None:
        self.start()
        log.info("CS%d serving clients on %s:%d", self.party, *self.client_addr)
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
                if self.fatal:
                    raise ConfigError(self.fatal)
        finally:
            self.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _spawn(self, fn, *args) -> None:
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    # --------------------------------------------------------------------- clients

    def _accept_clients(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._client_sock.accept()
            except OSError:
                return
            self._spawn(self._handle_client, SocketChannel(conn, timeout=None))

    def _job(self, qid: int) -> _Job:
        with self._cv:
            job = self._jobs.get(qid)
            if job is None:
                job = self._jobs[qid] = _Job(qid)
            return job

    def _handle_client(self, chan: SocketChannel) -> None:
        try:
            while not self._stop.is_set():
                frame = chan.recv_frame()
                qid = frame.session_id
                if frame.msg_type == MsgType.CLIENT_UPLOAD:
                    try:
                        q = EncryptedQuery.from_bytes(frame.payload)
                        if q.party != self.party or q.m != self.db.shape[1]:
                            raise ProtocolError(f"query shares for party {q.party} with m={q.m} do not fit this server")
                    except Skyline2PCError as exc:
                        chan.send_frame(Frame(MsgType.ERROR, qid, 0, str(exc).encode()))
                        continue
                    with self._cv:
                        self._job(qid).query = q
                        self._cv.notify_all()
                elif frame.msg_type == MsgType.CLIENT_QUERY:
                    self._answer(chan, qid)
                else:
                    chan.send_frame(Frame(MsgType.ERROR, qid, 0, f"unexpected {frame.msg_type.name}".encode()))
        except (TransportError, ProtocolError):
            pass
        finally:
            chan.close()

    def _answer(self, chan: SocketChannel, qid: int) -> None:
        job = self._job(qid)
        if job.query is None:
            chan.send_frame(Frame(MsgType.ERROR, qid, 0, b"query shares not uploaded"))
            return
        with self._cv:
            job.requested = True
            self._cv.notify_all()
        if self.party == 1:
            self._leader_q.put(job)
        if not job.done.wait(self.config.timeout):
            job.error = job.error or "timed out waiting for the peer server"
        with self._cv:
            self._jobs.pop(qid, None)
        if job.error:
            chan.send_frame(Frame(MsgType.ERROR, qid, 0, job.error.encode()))
        else:
            chan.send_frame(Frame(MsgType.CLIENT_RESULT, qid, 0, job.payload))

    # ------------------------------------------------------------------- peer link

    def _connect_peer(self) -> SocketChannel | None:
        kw = {"delay": self.config.delay, "timeout": self.config.timeout}
        if self.party == 1:
            try:
                conn, _ = self._peer_sock.accept()
            except OSError:
                return None
            return SocketChannel(conn, **kw)
        while not self._stop.is_set():
            try:
                return SocketChannel.connect(*self.config.peer, connect_timeout=2.0, **kw)
            except TransportError:
                time.sleep(0.2)
        return None

    def _sync(self, chan: SocketChannel) -> None:
        """Exchange shape and correlation cursors; any disagreement is fatal."""
        mine = {"n": int(self.db.shape[0]), "m": int(self.db.shape[1]), "l": self.ring.bits,
                "party": self.party, "counts": self.corr.counts, "position": self.corr.position()}
        chan.send_frame(Frame(MsgType.HANDSHAKE, 0, 0, json.dumps(mine).encode()))
        f = chan.recv_frame()
        if f.msg_type != MsgType.HANDSHAKE:
            raise ProtocolError(f"expected HANDSHAKE from peer, got {f.msg_type.name}")
        theirs = json.loads(f.payload)
        if theirs["party"] == self.party:
            raise ConfigError(f"peer is also CS{self.party}")
        for key in ("n", "m", "l"):
            if theirs[key] != mine[key]:
                raise ConfigError(f"peer database has {key}={theirs[key]}, ours has {mine[key]}")
        sync = {"counts": self.corr.counts, "position": self.corr.position()}
        chan.send_frame(Frame(MsgType.CORR_SYNC, 0, 1, json.dumps(sync).encode()))
        f = chan.recv_frame()
        if f.msg_type != MsgType.CORR_SYNC:
            raise ProtocolError(f"expected CORR_SYNC from peer, got {f.msg_type.name}")
        if json.loads(f.payload) != sync:
            raise ConfigError("correlation pools of the two servers are out of step")

    def _peer_loop(self) -> None:
        while not self._stop.is_set():
            chan = self._connect_peer()
            if chan is None:
                return
            self._peer_chan = chan
            try:
                self._sync(chan)
                log.info("CS%d linked to peer", self.party)
                while not self._stop.is_set():
                    if self.party == 1:
                        self._lead_one(chan)
                    else:
                        self._follow_one(chan)
            except ConfigError as exc:
                log.error("fatal: %s", exc)
                self.fatal = str(exc)
                self._fail_pending(str(exc))
                chan.close()
                return
            except (TransportError, ProtocolError) as exc:
                if not self._stop.is_set():
                    log.warning("peer link lost: %s", exc)
            finally:
                chan.close()
                self._peer_chan = None

    def _fail_pending(self, reason: str) -> None:
        with self._cv:
            for job in self._jobs.values():
                job.error = reason
                job.done.set()

    def _lead_one(self, chan: SocketChannel) -> None:
        job = self._leader_q.get()
        if job is None:
            return
        chan.send_frame(Frame(MsgType.HANDSHAKE, job.qid, 0, b"run"))
        f = chan.recv_frame()
        if f.msg_type == MsgType.ERROR:
            job.error = f"peer declined query {job.qid}: {f.payload.decode(errors='replace')}"
            job.done.set()
            return
        if f.msg_type != MsgType.HANDSHAKE or f.session_id != job.qid:
            job.error = "peer out of step"
            job.done.set()
            raise ProtocolError(f"expected HANDSHAKE for query {job.qid}, got {f.msg_type.name}/{f.session_id}")
        self._execute(chan, job)

    def _follow_one(self, chan: SocketChannel) -> None:
        chan.timeout = None
        chan.sock.settimeout(None)
        f = chan.recv_frame()
        chan.timeout = self.config.timeout
        chan.sock.settimeout(self.config.timeout)
        if f.msg_type != MsgType.HANDSHAKE:
            raise ProtocolError(f"expected HANDSHAKE from CS1, got {f.msg_type.name}")
        qid = f.session_id
        deadline = time.monotonic() + self.config.timeout
        with self._cv:
            while not self._stop.is_set():
                job = self._jobs.get(qid)
                if job is not None and job.query is not None and job.requested:
                    break
                left = deadline - time.monotonic()
                if left <= 0:
                    job = None
                    break
                self._cv.wait(left)
            else:
                return
        if job is None:
            chan.send_frame(Frame(MsgType.ERROR, qid, 0, b"no matching query at CS2"))
            return
        chan.send_frame(Frame(MsgType.HANDSHAKE, qid, 0, b"ready"))
        self._execute(chan, job)

    def _execute(self, chan: SocketChannel, job: _Job) -> None:
        sess = Session(self.party, chan, self.corr, self.ring, self.rng, session_id=job.qid)
        t0 = time.perf_counter()
        try:
            rs, st = run_query(sess, self.db, job.query)
        except Skyline2PCError as exc:
            log.error("query %d aborted at round %d: %s", job.qid, sess.round, exc)
            job.error = f"query aborted at round {sess.round}: {exc}"
            job.done.set()
            self._save_state()
            if isinstance(exc, (TransportError, ProtocolError)):
                raise
            return
        stats = {"latency_ms": 1000 * (time.perf_counter() - t0), "rounds": st.rounds, "bytes_sent": st.bytes_sent,
                 "bytes_recv": st.bytes_recv, "c_size": st.c_size, "s_size": st.s_size}
        job.payload = encode_result(rs, stats)
        self.queries_run += 1
        self._save_state()
        job.done.set()

    def _save_state(self) -> None:
        if self.config.state_path:
            Path(self.config.state_path).write_text(json.dumps(self.corr.position()))


def _listen(addr: tuple[str, int]) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        s.bind(addr)
    except OSError as exc:
        s.close()
        raise ConfigError(f"cannot listen on {addr[0]}:{addr[1]}: {exc}") from exc
    s.listen(16)
    return s


def run_server(role: str | int, config: ServerConfig) -> None:
    """Blocking daemon entry point; ``role`` is "CS1"/"CS2" (or 1/2)."""
    party = {"CS1": 1, "CS2": 2, "cs1": 1, "cs2": 2, 1: 1, 2: 2}.get(role)
    if party is None:
        raise ConfigError(f"unknown role {role!r}")
    config.party = party
    SkylineServer(config).serve_forever()


# ------------------------------------------------------------------------ client


def query_servers(addr1, addr2, q1: EncryptedQuery, q2: EncryptedQuery, *, qid: int | None = None,
                  timeout: float = 60.0):
    """Upload both query shares, trigger the query, collect both result shares.

    Returns ``(rs1, rs2, stats1, stats2)``.  Raises TransportError when a server
    is unreachable or silent past ``timeout`` and ProtocolError on a server error.
    """
    qid = uuid.uuid4().int & ((1 << 63) - 1) if qid is None else qid
    chans = [SocketChannel.connect(*a, connect_timeout=timeout, timeout=timeout) for a in (addr1, addr2)]
    try:
        for chan, q in zip(chans, (q1, q2)):
            chan.send_frame(Frame(MsgType.CLIENT_UPLOAD, qid, 0, q.to_bytes()))
        for chan in chans:
            chan.send_frame(Frame(MsgType.CLIENT_QUERY, qid, 0))
        out = []
        for i, chan in enumerate(chans, 1):
            f = chan.recv_frame()
            if f.msg_type == MsgType.ERROR:
                raise ProtocolError(f"CS{i} error: {f.payload.decode(errors='replace')}")
            if f.msg_type != MsgType.CLIENT_RESULT or f.session_id != qid:
                raise ProtocolError(f"CS{i} sent {f.msg_type.name} for query {f.session_id}")
            out.append(decode_result(f.payload))
    finally:
        for chan in chans:
            chan.close()
    (rs1, st1), (rs2, st2) = out
    return rs1, rs2, st1, st2
