"""Point-to-point message fabric shared by the collective schedules.

Two transports implement the same endpoint surface (``send``, ``recv``,
``try_recv``, ``new_collective_id``):

* :class:`InprocFabric` -- every rank lives in one process; delivery is
  reliable, FIFO per (src, dst) and deterministic.
* :class:`TcpEndpoint` -- one endpoint per process, connections opened lazily
  to the peers a rank actually talks to.

Both move :class:`WireMessage` values.  On TCP they are framed with a fixed
27-byte little-endian header::

    magic u32 | version u8 | collective_id u32 | phase u8 | step u32 |
    src u32 | dtype u8 | payload_len u64 | payload

Receives match on the exact key ``(src, collective_id, phase, step)``;
messages for other keys are held until asked for.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

MAGIC = 0x32445452
VERSION = 1
HEADER = struct.Struct("<IBIBIIBQ")
HEADER_SIZE = HEADER.size  # 27

DTYPE_F32, DTYPE_F16, DTYPE_F64 = 0, 1, 2
_CODE_TO_DTYPE = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_F16: np.dtype("<f2"),
    DTYPE_F64: np.dtype("<f8"),
}

DEFAULT_TCP_TIMEOUT = 30.0


class TransportError(Exception):
    pass


class FrameError(TransportError, ValueError):
    pass


class FabricClosed(TransportError):
    pass


class RecvTimeout(TransportError, TimeoutError):
    pass


class InvalidDestination(TransportError, ValueError):
    pass


def dtype_code(dtype) -> int:
    dt = np.dtype(dtype)
    for code, known in _CODE_TO_DTYPE.items():
        if dt == known or dt == known.newbyteorder("="):
            return code
    raise ValueError(f"unsupported dtype {dt}")


def code_dtype(code: int) -> np.dtype:
    try:
        return _CODE_TO_DTYPE[code]
    except KeyError:
        raise ValueError(f"unsupported dtype code {code}") from None


MessageKey = Tuple[int, int, int, int]


@dataclass(frozen=True)
class WireMessage:
    collective_id: int
    phase: int
    step: int
    src: int
    dtype: int
    payload: bytes = b""

    def __post_init__(self):
        itemsize = code_dtype(self.dtype).itemsize
        if len(self.payload) % itemsize:
            raise ValueError(
                f"payload of {len(self.payload)} bytes is not a multiple of "
                f"the element size {itemsize}"
            )

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def key(self) -> MessageKey:
        return (self.src, self.collective_id, self.phase, self.step)

    @classmethod
    def from_array(cls, values: np.ndarray, *, collective_id: int, phase: int,
                   step: int, src: int) -> "WireMessage":
        code = dtype_code(values.dtype)
        data = np.ascontiguousarray(values, dtype=_CODE_TO_DTYPE[code])
        return cls(collective_id, phase, step, src, code, data.tobytes())

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=code_dtype(self.dtype))


def encode_frame(msg: WireMessage) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, msg.collective_id, msg.phase,
                         msg.step, msg.src, msg.dtype, len(msg.payload))
    return header + msg.payload


def decode_header(header: bytes) -> Tuple[int, int, int, int, int, int]:
    """Validate a 27-byte header; return its fields after magic/version."""
    if len(header) < HEADER_SIZE:
        raise FrameError(f"truncated header: {len(header)} < {HEADER_SIZE} bytes")
    magic, version, cid, phase, step, src, dtype, plen = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if dtype not in _CODE_TO_DTYPE:
        raise FrameError(f"unsupported dtype code {dtype}")
    if plen % _CODE_TO_DTYPE[dtype].itemsize:
        raise FrameError(f"payload length {plen} not a multiple of element size")
    return cid, phase, step, src, dtype, plen


def decode_frame(frame: bytes) -> WireMessage:
    cid, phase, step, src, dtype, plen = decode_header(frame[:HEADER_SIZE])
    payload = frame[HEADER_SIZE:]
    if len(payload) < plen:
        raise FrameError(f"truncated payload: {len(payload)} < {plen} bytes")
    if len(payload) > plen:
        raise FrameError(f"{len(payload) - plen} trailing bytes after payload")
    return WireMessage(cid, phase, step, src, dtype, bytes(payload))


class SendRecord(NamedTuple):
    src: int
    dst: int
    collective_id: int
    phase: int
    step: int
    nbytes: int


class Mailbox:
    """Per-rank inbox keyed by (src, collective_id, phase, step)."""

    def __init__(self):
        self._cond = threading.Condition()
        self._queues: Dict[MessageKey, Deque[WireMessage]] = defaultdict(deque)
        self._closed = False

    def put(self, msg: WireMessage) -> None:
        with self._cond:
            if self._closed:
                raise FabricClosed("mailbox closed")
            self._queues[msg.key].append(msg)
            self._cond.notify_all()

    def _pop(self, key: MessageKey) -> Optional[WireMessage]:
        queue = self._queues.get(key)
        if not queue:
            return None
        msg = queue.popleft()
        if not queue:
            del self._queues[key]
        return msg

    def take(self, key: MessageKey, timeout: Optional[float] = None) -> WireMessage:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                msg = self._pop(key)
                if msg is not None:
                    return msg
                if self._closed:
                    raise FabricClosed("mailbox closed while waiting for %r" % (key,))
                if deadline is None:
                    self._cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise RecvTimeout(f"no message for key {key} after {timeout}s")
                    self._cond.wait(remaining)

    def try_take(self, key: MessageKey) -> Optional[WireMessage]:
        with self._cond:
            if self._closed and not self._queues.get(key):
                raise FabricClosed("mailbox closed")
            return self._pop(key)

    def pending(self) -> int:
        with self._cond:
            return sum(len(q) for q in self._queues.values())

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


FaultHook = Callable[[WireMessage], WireMessage]


def flip_first_payload_byte(byte_index: Optional[int] = None, mask: int = 0x40) -> FaultHook:
    """Fault hook corrupting one byte of the first non-empty payload.

    By default the most significant byte of the first element is hit so the
    corruption lands in the exponent and cannot hide inside rounding error.
    """
    fired = False
    lock = threading.Lock()

    def hook(msg: WireMessage) -> WireMessage:
        nonlocal fired
        with lock:
            if fired or not msg.payload:
                return msg
            fired = True
        idx = code_dtype(msg.dtype).itemsize - 1 if byte_index is None else byte_index
        data = bytearray(msg.payload)
        data[idx] ^= mask
        return WireMessage(msg.collective_id, msg.phase, msg.step, msg.src,
                           msg.dtype, bytes(data))

    return hook


class Endpoint:
    """One rank's handle on an :class:`InprocFabric`."""

    def __init__(self, fabric: "InprocFabric", rank: int):
        self.fabric = fabric
        self.rank = rank
        self._next_cid = 0

    @property
    def n_ranks(self) -> int:
        return self.fabric.n_ranks

    def new_collective_id(self) -> int:
        cid = self._next_cid
        self._next_cid = (self._next_cid + 1) & 0xFFFFFFFF
        return cid

    def send(self, dst: int, msg: WireMessage) -> None:
        self.fabric._send(self.rank, dst, msg)

    def recv(self, src: int, collective_id: int, phase: int, step: int,
             timeout: Optional[float] = None) -> WireMessage:
        self.fabric._check_rank(src)
        return self.fabric.mailboxes[self.rank].take(
            (src, collective_id, phase, step), timeout)

    def try_recv(self, src: int, collective_id: int, phase: int,
                 step: int) -> Optional[WireMessage]:
        self.fabric._check_rank(src)
        return self.fabric.mailboxes[self.rank].try_take((src, collective_id, phase, step))

    def __repr__(self):
        return f"Endpoint(rank={self.rank}, n_ranks={self.n_ranks})"


class InprocFabric:
    """All ranks in one process.

    ``latency`` sleeps the sender for that many seconds per message, which
    stands in for a per-message network latency in benchmarks.  ``fault``
    may rewrite messages in flight (negative controls).  Every send is
    appended to :attr:`log` for trace comparisons.
    """

    def __init__(self, n_ranks: int, *, latency: float = 0.0,
                 fault: Optional[FaultHook] = None, record: bool = True):
        if n_ranks < 1:
            raise ValueError(f"n_ranks must be >= 1, got {n_ranks}")
        self.n_ranks = n_ranks
        self.latency = latency
        self.fault = fault
        self.record = record
        self.mailboxes = [Mailbox() for _ in range(n_ranks)]
        self.endpoints = [Endpoint(self, r) for r in range(n_ranks)]
        self.log: List[SendRecord] = []
        self._log_lock = threading.Lock()
        self._closed = False

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.n_ranks:
            raise InvalidDestination(f"rank {rank} out of range [0, {self.n_ranks})")

    def _send(self, src: int, dst: int, msg: WireMessage) -> None:
        if self._closed:
            raise FabricClosed("fabric closed")
        self._check_rank(dst)
        if dst == src:
            raise InvalidDestination(f"rank {src} cannot send to itself")
        if self.latency:
            time.sleep(self.latency)
        if self.fault is not None:
            msg = self.fault(msg)
        if self.record:
            with self._log_lock:
                self.log.append(SendRecord(src, dst, msg.collective_id, msg.phase,
                                           msg.step, msg.payload_len))
        self.mailboxes[dst].put(msg)

    def close(self) -> None:
        self._closed = True
        for box in self.mailboxes:
            box.close()


def create_inproc_fabric(n_ranks: int, **kwargs) -> List[Endpoint]:
    return InprocFabric(n_ranks, **kwargs).endpoints


def load_peers(path) -> Dict[int, Tuple[str, int]]:
    """Read a peer table: one ``rank host:port`` per line, ``#`` comments."""
    peers: Dict[int, Tuple[str, int]] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                rank_text, addr = line.split()
                host, port_text = addr.rsplit(":", 1)
                rank, port = int(rank_text), int(port_text)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'rank host:port', got {raw.strip()!r}") from None
            if rank in peers:
                raise ValueError(f"{path}:{lineno}: duplicate rank {rank}")
            peers[rank] = (host, port)
    if sorted(peers) != list(range(len(peers))):
        raise ValueError(f"{path}: ranks must be exactly 0..{len(peers) - 1}")
    return peers


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> WireMessage:
    header = _recv_exact(sock, HEADER_SIZE)
    plen = decode_header(header)[-1]
    payload = _recv_exact(sock, plen) if plen else b""
    return decode_frame(header + payload)


class TcpEndpoint:
    """A rank of a multi-process run talking TCP to its peers.

    ``peers`` maps every rank to ``(host, port)``.  This rank listens on its
    own entry (or on ``listen_sock`` if the caller pre-bound one) and opens
    an outgoing connection to a peer the first time it sends to it.
    """

    def __init__(self, rank: int, peers: Dict[int, Tuple[str, int]], *,
                 timeout: float = DEFAULT_TCP_TIMEOUT,
                 listen_sock: Optional[socket.socket] = None):
        if rank not in peers:
            raise InvalidDestination(f"rank {rank} missing from peer table")
        self.rank = rank
        self.peers = dict(peers)
        self.n_ranks = len(peers)
        self.timeout = timeout
        self.fabric = self
        self.log: List[SendRecord] = []
        self._mailbox = Mailbox()
        self._out: Dict[int, socket.socket] = {}
        self._out_locks: Dict[int, threading.Lock] = defaultdict(threading.Lock)
        self._conn_lock = threading.Lock()
        self._readers: List[threading.Thread] = []
        self._accepted: List[socket.socket] = []
        self._closed = False
        self._next_cid = 0
        if listen_sock is None:
            host, port = peers[rank]
            listen_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listen_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                listen_sock.bind((host, port))
            except OSError as exc:
                listen_sock.close()
                raise TransportError(f"rank {rank}: cannot listen on {host}:{port}: {exc}") from exc
        listen_sock.listen(8)
        self._listener = listen_sock
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"tcp-accept-{rank}", daemon=True)
        self._accept_thread.start()

    def new_collective_id(self) -> int:
        cid = self._next_cid
        self._next_cid = (self._next_cid + 1) & 0xFFFFFFFF
        return cid

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._accepted.append(conn)
            reader = threading.Thread(target=self._read_loop, args=(conn,),
                                      name=f"tcp-read-{self.rank}", daemon=True)
            self._readers.append(reader)
            reader.start()

    def _read_loop(self, conn: socket.socket) -> None:
        while True:
            try:
                msg = read_frame(conn)
            except (ConnectionError, OSError):
                return
            except FrameError:
                log.exception("rank %d: dropping connection after bad frame", self.rank)
                conn.close()
                return
            try:
                self._mailbox.put(msg)
            except FabricClosed:
                return

    def _connect(self, dst: int) -> socket.socket:
        with self._conn_lock:
            sock = self._out.get(dst)
            if sock is not None:
                return sock
            host, port = self.peers[dst]
            deadline = time.monotonic() + self.timeout
            while True:
                try:
                    sock = socket.create_connection((host, port), timeout=self.timeout)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise TransportError(f"rank {self.rank}: cannot reach rank {dst} at {host}:{port}")
                    time.sleep(0.05)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(None)
            self._out[dst] = sock
            return sock

    def send(self, dst: int, msg: WireMessage) -> None:
        if self._closed:
            raise FabricClosed("endpoint closed")
        if dst not in self.peers:
            raise InvalidDestination(f"rank {dst} not in peer table")
        if dst == self.rank:
            raise InvalidDestination(f"rank {self.rank} cannot send to itself")
        sock = self._connect(dst)
        frame = encode_frame(msg)
        with self._out_locks[dst]:
            try:
                sock.sendall(frame)
            except OSError as exc:
                raise TransportError(f"send {self.rank}->{dst} failed: {exc}") from exc
        self.log.append(SendRecord(self.rank, dst, msg.collective_id, msg.phase,
                                   msg.step, msg.payload_len))

    def recv(self, src: int, collective_id: int, phase: int, step: int,
             timeout: Optional[float] = None) -> WireMessage:
        if src not in self.peers:
            raise InvalidDestination(f"rank {src} not in peer table")
        return self._mailbox.take((src, collective_id, phase, step),
                                  self.timeout if timeout is None else timeout)

    def try_recv(self, src: int, collective_id: int, phase: int,
                 step: int) -> Optional[WireMessage]:
        return self._mailbox.try_take((src, collective_id, phase, step))

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._mailbox.close()
        try:
            self._listener.close()
        except OSError:
            pass
        for sock in list(self._out.values()) + self._accepted:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"TcpEndpoint(rank={self.rank}, n_ranks={self.n_ranks})"
