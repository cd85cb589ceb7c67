"""Node-to-node messaging.

Every message is encoded to a length-prefixed little-endian frame, on both
backends, so that payloads are always copied and traces are comparable.

Frame layout::

    u32 body_length | u8 kind | u32 src | u32 dst | payload

Payloads::

    ACTIVATE       key, u16 slot, item
    STEAL_REQUEST  u32 thief, u64 request_id
    STEAL_GRANT    u64 request_id, u32 n, n * (key, i64 priority, u8 arity, arity * item)
    STEAL_DENY     u64 request_id
    TERM_TOKEN     u8 color, i64 count

    key            u16 template_id, u8 n, n * i64
    item           u8 kind, then DENSE: u32 rows, u32 cols, rows*cols f64
                   | SPARSE: nothing | TREE_NODE/SCALAR: u8 n, n * i64
"""

from __future__ import annotations

import enum
import logging
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .taskgraph import DataItem, DataKind, TaskKey

log = logging.getLogger(__name__)

FRAME_LEN = struct.Struct("<I")
HEADER = struct.Struct("<BII")
HEADER_MIN = FRAME_LEN.size + HEADER.size

BIND_ENV = "DWSTEAL_BIND_HOST"


class MalformedFrame(ValueError):
    pass


class PeerDown(ConnectionError):
    pass


class Kind(enum.IntEnum):
    ACTIVATE = 1
    STEAL_REQUEST = 2
    STEAL_GRANT = 3
    STEAL_DENY = 4
    TERM_TOKEN = 5


# Safra token colours; TERMINATE is the shutdown broadcast
WHITE, BLACK, TERMINATE = 0, 1, 2

BASIC_KINDS = frozenset({Kind.ACTIVATE, Kind.STEAL_GRANT})


class TaskRecord(NamedTuple):
    key: TaskKey
    priority: int
    inputs: tuple

    @property
    def template_id(self) -> int:
        return self.key.template_id


@dataclass
class Message:
    kind: Kind
    src: int
    dst: int
    key: TaskKey | None = None
    slot: int = 0
    item: DataItem | None = None
    thief: int = 0
    request_id: int = 0
    tasks: list = field(default_factory=list)
    color: int = WHITE
    count: int = 0

    @classmethod
    def activate(cls, src, dst, key, slot, item):
        return cls(Kind.ACTIVATE, src, dst, key=key, slot=slot, item=item)

    @classmethod
    def steal_request(cls, src, dst, request_id):
        return cls(Kind.STEAL_REQUEST, src, dst, thief=src, request_id=request_id)

    @classmethod
    def steal_grant(cls, src, dst, request_id, tasks):
        return cls(Kind.STEAL_GRANT, src, dst, request_id=request_id, tasks=list(tasks))

    @classmethod
    def steal_deny(cls, src, dst, request_id):
        return cls(Kind.STEAL_DENY, src, dst, request_id=request_id)

    @classmethod
    def token(cls, src, dst, color, count):
        return cls(Kind.TERM_TOKEN, src, dst, color=color, count=count)

    @property
    def is_basic(self) -> bool:
        return self.kind in BASIC_KINDS


def _enc_key(out: list, key: TaskKey):
    out.append(struct.pack("<HB", key.template_id, len(key.index)))
    out.append(struct.pack(f"<{len(key.index)}q", *key.index))


def _enc_item(out: list, item: DataItem):
    out.append(struct.pack("<B", int(item.kind)))
    if item.kind == DataKind.DENSE:
        arr = item.payload
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        out.append(struct.pack("<II", *arr.shape))
        out.append(arr.astype("<f8", copy=False).tobytes())
    elif item.kind != DataKind.SPARSE:
        out.append(struct.pack(f"<B{len(item.payload)}q", len(item.payload), *item.payload))


def encode(msg: Message) -> bytes:
    parts = [HEADER.pack(int(msg.kind), msg.src, msg.dst)]
    k = msg.kind
    if k == Kind.ACTIVATE:
        _enc_key(parts, msg.key)
        parts.append(struct.pack("<H", msg.slot))
        _enc_item(parts, msg.item)
    elif k == Kind.STEAL_REQUEST:
        parts.append(struct.pack("<IQ", msg.thief, msg.request_id))
    elif k == Kind.STEAL_GRANT:
        parts.append(struct.pack("<QI", msg.request_id, len(msg.tasks)))
        for rec in msg.tasks:
            _enc_key(parts, rec.key)
            parts.append(struct.pack("<qB", rec.priority, len(rec.inputs)))
            for item in rec.inputs:
                if item is None:
                    raise ValueError(f"grant record {rec.key} has an empty input slot")
                _enc_item(parts, item)
    elif k == Kind.STEAL_DENY:
        parts.append(struct.pack("<Q", msg.request_id))
    elif k == Kind.TERM_TOKEN:
        parts.append(struct.pack("<Bq", msg.color, msg.count))
    else:
        raise ValueError(f"unknown message kind {k!r}")
    body = b"".join(parts)
    return FRAME_LEN.pack(len(body)) + body


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf = buf
        self.pos = pos

    def take(self, fmt: str):
        s = struct.calcsize(fmt)
        if self.pos + s > len(self.buf):
            raise MalformedFrame("truncated frame")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += s
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise MalformedFrame("truncated frame")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def key(self) -> TaskKey:
        tid, n = self.take("<HB")
        return TaskKey(tid, tuple(self.take(f"<{n}q")))

    def item(self) -> DataItem:
        (kind,) = self.take("<B")
        try:
            kind = DataKind(kind)
        except ValueError:
            raise MalformedFrame(f"unknown data kind {kind}") from None
        if kind == DataKind.DENSE:
            rows, cols = self.take("<II")
            arr = np.frombuffer(self.raw(8 * rows * cols), dtype="<f8").reshape(rows, cols)
            return DataItem.dense(arr)
        if kind == DataKind.SPARSE:
            return DataItem.sparse()
        (n,) = self.take("<B")
        return DataItem(kind, self.take(f"<{n}q"))


def decode(frame: bytes) -> Message:
    if len(frame) < HEADER_MIN:
        raise MalformedFrame(f"frame of {len(frame)} bytes is shorter than a header")
    (length,) = FRAME_LEN.unpack_from(frame, 0)
    if length != len(frame) - FRAME_LEN.size:
        raise MalformedFrame(f"frame length field {length} != {len(frame) - FRAME_LEN.size}")
    r = _Reader(frame, FRAME_LEN.size)
    kind, src, dst = r.take(HEADER.format)
    try:
        kind = Kind(kind)
    except ValueError:
        raise MalformedFrame(f"unknown message kind {kind}") from None
    msg = Message(kind, src, dst)
    if kind == Kind.ACTIVATE:
        msg.key = r.key()
        (msg.slot,) = r.take("<H")
        msg.item = r.item()
    elif kind == Kind.STEAL_REQUEST:
        msg.thief, msg.request_id = r.take("<IQ")
    elif kind == Kind.STEAL_GRANT:
        msg.request_id, n = r.take("<QI")
        for _ in range(n):
            key = r.key()
            prio, arity = r.take("<qB")
            msg.tasks.append(TaskRecord(key, prio, tuple(r.item() for _ in range(arity))))
    elif kind == Kind.STEAL_DENY:
        (msg.request_id,) = r.take("<Q")
    elif kind == Kind.TERM_TOKEN:
        msg.color, msg.count = r.take("<Bq")
    if r.pos != len(frame):
        raise MalformedFrame(f"{len(frame) - r.pos} trailing bytes")
    return msg


class Endpoint:
    """One node's view of the network.

    ``send`` may be called from any thread.  ``recv`` is called only by the
    node's communication agent.
    """

    def __init__(self, rank: int, n_nodes: int):
        self.rank = rank
        self.n_nodes = n_nodes
        self.inbox: queue.Queue = queue.Queue()
        self._count_lock = threading.Lock()
        self.sent = {k: 0 for k in Kind}
        self.received = {k: 0 for k in Kind}

    def send(self, msg: Message):
        if not 0 <= msg.dst < self.n_nodes:
            raise ValueError(f"destination {msg.dst} outside [0, {self.n_nodes})")
        msg.src = self.rank
        frame = encode(msg)
        with self._count_lock:
            self.sent[msg.kind] += 1
        self._deliver(msg.dst, frame)

    def recv(self, timeout: float | None = None) -> Message | None:
        try:
            frame = self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        msg = decode(frame)
        with self._count_lock:
            self.received[msg.kind] += 1
        return msg

    def _deliver(self, dst: int, frame: bytes):
        raise NotImplementedError

    def close(self):
        pass


class InProcNetwork:
    """Several logical nodes in one process; one inbox queue per node."""

    def __init__(self, n_nodes: int):
        self.n_nodes = n_nodes
        self.endpoints = [_InProcEndpoint(self, r, n_nodes) for r in range(n_nodes)]

    def endpoint(self, rank: int) -> Endpoint:
        return self.endpoints[rank]


class _InProcEndpoint(Endpoint):
    def __init__(self, net, rank, n_nodes):
        super().__init__(rank, n_nodes)
        self._net = net

    def _deliver(self, dst, frame):
        self._net.endpoints[dst].inbox.put(frame)


def read_hostfile(path) -> dict[int, tuple[str, int]]:
    """Parse ``rank host:port`` lines; ``#`` starts a comment."""
    addrs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                rank, addr = line.split()
                host, port = addr.rsplit(":", 1)
                addrs[int(rank)] = (host, int(port))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'rank host:port', got {line!r}") from None
    if sorted(addrs) != list(range(len(addrs))):
        raise ValueError(f"{path}: ranks must be 0..n-1, got {sorted(addrs)}")
    return addrs


def _recv_exact(sock, n) -> bytes | None:
    chunks = []
    while n:
        b = sock.recv(n)
        if not b:
            return None
        chunks.append(b)
        n -= len(b)
    return b"".join(chunks)


class SocketEndpoint(Endpoint):
    """TCP backend: one listening socket per node and one outbound
    connection per peer, so each (src, dst) pair is a single ordered stream."""

    def __init__(self, rank: int, addresses: dict, connect_timeout: float = 30.0):
        super().__init__(rank, len(addresses))
        self.addresses = addresses
        self.connect_timeout = connect_timeout
        host, port = addresses[rank]
        bind_host = os.environ.get(BIND_ENV, host)
        self._listener = socket.create_server((bind_host, port), reuse_port=False)
        self._listener.settimeout(0.2)
        self._out: dict[int, socket.socket] = {}
        self._out_locks = {r: threading.Lock() for r in addresses}
        self._closed = threading.Event()
        self._readers: list[threading.Thread] = []
        self._acceptor = threading.Thread(target=self._accept_loop, name=f"accept-{rank}", daemon=True)
        self._acceptor.start()

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                                 name=f"reader-{self.rank}")
            t.start()
            self._readers.append(t)

    def _read_loop(self, conn):
        with conn:
            while True:
                try:
                    head = _recv_exact(conn, FRAME_LEN.size)
                    if head is None:
                        return
                    (length,) = FRAME_LEN.unpack(head)
                    body = _recv_exact(conn, length)
                except OSError:
                    return
                if body is None:
                    if not self._closed.is_set():
                        log.error("rank %d: peer closed mid-frame", self.rank)
                    return
                self.inbox.put(head + body)

    def _connect(self, dst):
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                s = socket.create_connection(self.addresses[dst], timeout=5.0)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                s.settimeout(None)
                return s
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise PeerDown(f"rank {self.rank}: cannot reach rank {dst} at "
                                   f"{self.addresses[dst]}: {exc}") from exc
                time.sleep(0.05)

    def _deliver(self, dst, frame):
        if dst == self.rank:
            self.inbox.put(frame)
            return
        with self._out_locks[dst]:
            sock = self._out.get(dst)
            if sock is None:
                sock = self._out[dst] = self._connect(dst)
            try:
                sock.sendall(frame)
            except OSError as exc:
                raise PeerDown(f"rank {self.rank}: send to rank {dst} failed: {exc}") from exc

    def close(self):
        self._closed.set()
        for r, s in list(self._out.items()):
            with self._out_locks[r]:
                try:
                    s.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                s.close()
        self._listener.close()
        self._acceptor.join(timeout=1.0)
        for t in self._readers:
            t.join(timeout=1.0)
