"""One-sided transport engine.

Per process there is one engine. It owns:

  * a TCP mesh over 127.0.0.1 (rendezvous through rank 0, then all-to-all),
    which always carries control traffic (BARRIER / BOOTSTRAP) and carries
    data frames for InterNode paths when DIOMP_TRANSPORT=tcp;
  * one mmap'd shared-memory region per simulated node (files under
    /dev/shm) holding lock-free SPSC byte rings per ordered co-node rank
    pair, used for IntraNodeIPC paths -- plus, when DIOMP_TRANSPORT=shm, an
    extra region whose rings carry InterNode traffic between same-host
    "nodes";
  * a dedicated progress thread that drains sockets and rings, applies
    inbound PUTs straight into the local segments, answers GET/CELL_FETCH
    requests and retires completion handles. Target-side application code
    never runs to serve an RMA.

Callers may also drive the engine themselves: progress() performs one
non-blocking drain pass and is safe from any thread (fence does this
opportunistically). All blocking waits go through a condition variable so
nothing ever spins.

Transfers fragment at the channel limit (64 MiB on sockets -- the wire
cap -- and the ring capacity on shared memory); fragments are independent
offset-adjusted sub-operations, so reassembly is implicit. PUT completion
is one ACK per fragment; GET is request/response. Two puts racing to the
same bytes before a fence resolve as last-writer-on-the-wire.
"""

from __future__ import annotations

import enum
import errno
import itertools
import json
import mmap
import os
import secrets
import select
import socket
import struct
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field

from .errors import (ConfigMismatch, HandshakeTimeout, InvalidAddress,
                     PeerFailure, TransportFailure)
from .wire import HEADER_LEN, MAX_FRAGMENT, Opcode, Status, decode_header, encode_header

SHM_RING_BYTES = 2 * 1024 * 1024
_RING_HDR = 64
_U64 = struct.Struct("<Q")
_GETREQ = struct.Struct("<Q")
_BARRIER_PAYLOAD = struct.Struct("<QQI")


class HandleState(enum.Enum):
    Pending = "pending"
    LocalDone = "local_done"
    RemoteDone = "remote_done"
    Failed = "failed"


_STATUS_ERRORS = {
    Status.INVALID_ADDRESS: InvalidAddress,
    Status.BAD_REQUEST: TransportFailure,
    Status.INTERNAL: TransportFailure,
}


class CompletionHandle:
    """Tracks one logical RMA operation (possibly many wire fragments)."""

    def __init__(self, engine: "TransportEngine | None", op_id: int,
                 target_key: tuple[int, int]):
        self._engine = engine
        self.op_id = op_id
        self.target_key = target_key
        self.state = HandleState.Pending
        self.error: Exception | None = None
        self.completed_at: float | None = None

    def done(self) -> bool:
        return self.state in (HandleState.RemoteDone, HandleState.Failed)

    def wait(self, timeout: float | None = None):
        """Block until remote completion; raises the failure if any."""
        if self._engine is not None and not self.done():
            self._engine.wait_until(self.done, timeout,
                                    f"RMA op {self.op_id} did not complete")
        if self.state is HandleState.Failed:
            raise self.error
        return self

    @staticmethod
    def completed(target_key=( -1, -1)) -> "CompletionHandle":
        h = CompletionHandle(None, -1, target_key)
        h.state = HandleState.RemoteDone
        h.completed_at = time.perf_counter()
        return h


class _Op:
    __slots__ = ("handle", "expected", "done", "failed")

    def __init__(self, handle, expected):
        self.handle = handle
        self.expected = expected
        self.done = 0
        self.failed: Status | None = None


@dataclass
class TransportStats:
    sent_frames: Counter = field(default_factory=Counter)
    recv_frames: Counter = field(default_factory=Counter)
    sent_payload: Counter = field(default_factory=Counter)
    recv_payload: Counter = field(default_factory=Counter)
    direct_puts: int = 0
    direct_put_bytes: int = 0
    direct_gets: int = 0
    direct_get_bytes: int = 0
    issued_ops: int = 0
    retired_ops: int = 0
    serve_thread_ids: set = field(default_factory=set)

    def put_bytes_total(self) -> int:
        return self.sent_payload[Opcode.PUT] + self.direct_put_bytes

    def cell_fetches_sent(self) -> int:
        return self.sent_frames[Opcode.CELL_FETCH]


class ShmRing:
    """Single-producer single-consumer byte ring inside an mmap.

    Header: tail (producer cumulative u64) at +0, head (consumer cumulative
    u64) at +8. Data area follows at +64. Cumulative counters never wrap in
    practice (2^64 bytes), so free space is cap - (tail - head).
    """

    def __init__(self, mm: mmap.mmap, base: int, size: int):
        self._mm = mm
        self._base = base
        self.cap = size - _RING_HDR
        self._data = base + _RING_HDR

    def _load(self, off: int) -> int:
        return _U64.unpack_from(self._mm, self._base + off)[0]

    def _store(self, off: int, value: int):
        _U64.pack_into(self._mm, self._base + off, value)

    @property
    def tail(self) -> int:
        return self._load(0)

    @property
    def head(self) -> int:
        return self._load(8)

    def free_space(self) -> int:
        return self.cap - (self.tail - self.head)

    def readable(self) -> int:
        return self.tail - self.head

    def write(self, views) -> int:
        """Append the given buffers; caller must have checked free_space."""
        tail = self.tail
        for view in views:
            n = len(view)
            pos = tail % self.cap
            first = min(n, self.cap - pos)
            self._mm[self._data + pos:self._data + pos + first] = view[:first]
            if first < n:
                self._mm[self._data:self._data + n - first] = view[first:]
            tail += n
        self._store(0, tail)
        return tail

    def read_into(self, dst, n: int):
        """Copy n bytes into dst (memoryview) and advance head."""
        head = self.head
        pos = head % self.cap
        first = min(n, self.cap - pos)
        dst[:first] = self._mm[self._data + pos:self._data + pos + first]
        if first < n:
            dst[first:n] = self._mm[self._data:self._data + n - first]
        self._store(8, head + n)

    def skip(self, n: int):
        self._store(8, self.head + n)


class _ShmRegion:
    """One mmap'd file holding rings for a set of ordered rank pairs."""

    def __init__(self, path: str, pairs: list[tuple[int, int]], ring_bytes: int,
                 create: bool, timeout: float):
        self.path = path
        self.created = create
        self.pairs = pairs
        size = max(len(pairs), 1) * ring_bytes
        if create:
            fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o600)
            os.ftruncate(fd, size)
        else:
            deadline = time.monotonic() + timeout
            while True:
                try:
                    fd = os.open(path, os.O_RDWR)
                    if os.fstat(fd).st_size >= size:
                        break
                    os.close(fd)
                except FileNotFoundError:
                    pass
                if time.monotonic() > deadline:
                    raise HandshakeTimeout(f"shared region {path} never appeared")
                time.sleep(0.01)
        self.mm = mmap.mmap(fd, size)
        os.close(fd)
        self.rings = {pair: ShmRing(self.mm, i * ring_bytes, ring_bytes)
                      for i, pair in enumerate(pairs)}

    def close(self):
        try:
            self.mm.close()
        except (BufferError, ValueError):
            pass
        if self.created:
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass


class _RxMachine:
    """Incremental frame parser shared by socket and ring consumers."""

    def __init__(self):
        self.header = bytearray(HEADER_LEN)
        self.header_fill = 0
        self.fields = None           # parsed header tuple
        self.sink: memoryview | None = None
        self.scratch: bytearray | None = None
        self.payload_fill = 0
        self.payload_len = 0

    def needs_header(self) -> bool:
        return self.fields is None

    def reset(self):
        self.header_fill = 0
        self.fields = None
        self.sink = None
        self.scratch = None
        self.payload_fill = 0
        self.payload_len = 0


class _Peer:
    def __init__(self, rank: int):
        self.rank = rank
        self.sock: socket.socket | None = None
        self.alive = True
        self.rx = _RxMachine()
        self.out: deque = deque()        # memoryviews pending on the socket
        self.out_pos = 0                 # progress inside out[0]
        self.shm_tx: ShmRing | None = None
        self.shm_rx: ShmRing | None = None
        self.shm_out: deque = deque()    # frames waiting for ring space
        self.shm_rx_machine = _RxMachine()


class TransportEngine:
    """See module docstring."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.rank = cfg.rank
        self.nranks = cfg.nranks
        self.lock = threading.RLock()
        self.cond = threading.Condition(self.lock)
        self.stats = TransportStats()
        self.peers: dict[int, _Peer] = {r: _Peer(r) for r in range(cfg.nranks)
                                        if r != cfg.rank}
        self.dead_peers: set[int] = set()
        self._ops: dict[int, _Op] = {}                  # op_id -> op
        self._frag: dict[int, tuple] = {}               # msg_id -> (op, dest_view|None)
        self._outstanding: Counter = Counter()          # target (rank, device) -> count
        self.failed_ops: list[tuple[tuple[int, int], Exception]] = []
        self._msg_ids = itertools.count(1)
        self.barrier_mailbox: dict[tuple, bool] = {}
        self.ctrl_mailbox: dict[bytes, deque] = {}
        self._gm = None
        self._regions: list[_ShmRegion] = []
        self._listen: socket.socket | None = None
        self._wake_r, self._wake_w = os.pipe()
        os.set_blocking(self._wake_r, False)
        os.set_blocking(self._wake_w, False)
        self._stop = False
        self._thread: threading.Thread | None = None
        self.node_ids: tuple[int, ...] = ()
        self.process_ids: tuple[int, ...] = ()
        self.session = cfg.session

    # ------------------------------------------------------------------
    # bootstrap: rendezvous, mesh, shared regions
    # ------------------------------------------------------------------

    def connect(self):
        cfg = self.cfg
        deadline = time.monotonic() + cfg.timeout
        self._listen = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listen.bind((cfg.listen_host, 0))
        self._listen.listen(max(self.nranks, 4))
        my_port = self._listen.getsockname()[1]

        hello = {"rank": self.rank, "port": my_port, "pid": cfg.process_tag,
                 "node": cfg.node_id, "digest": cfg.digest().hex()}

        if self.nranks == 1:
            self.session = self.session or secrets.token_hex(8)
            self.node_ids = (cfg.node_id,)
            self.process_ids = (cfg.process_tag,)
        elif self.rank == 0:
            table = self._rendezvous_root(hello, deadline)
            self._apply_table(table)
        else:
            table = self._rendezvous_leaf(hello, deadline)
            self._apply_table(table)

        self._build_mesh(deadline)
        self._setup_shm()
        self._thread = threading.Thread(target=self._progress_loop,
                                        name=f"diomp-progress-{self.rank}",
                                        daemon=True)
        self._thread.start()

    def _rendezvous_root(self, hello, deadline):
        cfg = self.cfg
        acc = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        acc.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            acc.bind(cfg.rendezvous)
        except OSError as e:
            raise HandshakeTimeout(f"cannot bind rendezvous {cfg.rendezvous}: {e}") from e
        acc.listen(self.nranks)
        acc.settimeout(1.0)
        hellos = {0: hello}
        conns = {}
        while len(hellos) < self.nranks:
            if time.monotonic() > deadline:
                for c in conns.values():
                    c.close()
                acc.close()
                raise HandshakeTimeout(
                    f"only {len(hellos)}/{self.nranks} ranks arrived at rendezvous")
            try:
                conn, _ = acc.accept()
            except socket.timeout:
                continue
            line = _recv_line(conn, deadline)
            peer_hello = json.loads(line)
            hellos[peer_hello["rank"]] = peer_hello
            conns[peer_hello["rank"]] = conn
        acc.close()

        digests = {h["digest"] for h in hellos.values()}
        status = "ok" if len(digests) == 1 else "mismatch"
        self.session = self.session or secrets.token_hex(8)
        table = {
            "status": status,
            "session": self.session,
            "ports": [hellos[r]["port"] for r in range(self.nranks)],
            "pids": [hellos[r]["pid"] for r in range(self.nranks)],
            "nodes": [hellos[r]["node"] for r in range(self.nranks)],
        }
        blob = (json.dumps(table) + "\n").encode()
        for conn in conns.values():
            conn.sendall(blob)
            conn.close()
        if status != "ok":
            raise ConfigMismatch("ranks presented different runtime configurations")
        return table

    def _rendezvous_leaf(self, hello, deadline):
        cfg = self.cfg
        sock = None
        while True:
            try:
                sock = socket.create_connection(cfg.rendezvous, timeout=1.0)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise HandshakeTimeout(
                        f"rank {self.rank}: rendezvous {cfg.rendezvous} unreachable")
                time.sleep(0.02)
        sock.sendall((json.dumps(hello) + "\n").encode())
        table = json.loads(_recv_line(sock, deadline))
        sock.close()
        if table["status"] != "ok":
            raise ConfigMismatch("ranks presented different runtime configurations")
        return table

    def _apply_table(self, table):
        self.session = table["session"]
        self._ports = table["ports"]
        self.node_ids = tuple(table["nodes"])
        self.process_ids = tuple(table["pids"])

    def _build_mesh(self, deadline):
        cfg = self.cfg
        if self.nranks == 1:
            return
        expected_from = [r for r in range(self.nranks) if r > self.rank]
        pending = set(expected_from)
        self._listen.settimeout(0.5)
        for r in range(self.rank):
            while True:
                try:
                    s = socket.create_connection((cfg.listen_host, self._ports[r]),
                                                 timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise HandshakeTimeout(f"cannot reach rank {r}")
                    time.sleep(0.02)
            s.sendall(struct.pack("<I", self.rank))
            self._adopt_socket(r, s)
        while pending:
            if time.monotonic() > deadline:
                raise HandshakeTimeout(f"ranks {sorted(pending)} never connected")
            try:
                conn, _ = self._listen.accept()
            except socket.timeout:
                continue
            raw = _recv_exact(conn, 4, deadline)
            peer = struct.unpack("<I", raw)[0]
            pending.discard(peer)
            self._adopt_socket(peer, conn)

    def _adopt_socket(self, rank: int, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        for opt in (socket.SO_SNDBUF, socket.SO_RCVBUF):
            try:
                sock.setsockopt(socket.SOL_SOCKET, opt, 4 * 1024 * 1024)
            except OSError:
                pass
        sock.setblocking(False)
        self.peers[rank].sock = sock

    def _setup_shm(self):
        cfg = self.cfg
        nodes: dict[int, list[int]] = {}
        for r, n in enumerate(self.node_ids):
            nodes.setdefault(n, []).append(r)
        my_node = self.node_ids[self.rank] if self.node_ids else cfg.node_id
        members = nodes.get(my_node, [self.rank])
        if len(members) > 1:
            pairs = [(a, b) for a in members for b in members if a != b]
            path = os.path.join(cfg.shm_dir, f"diomp-{self.session}-n{my_node}")
            region = _ShmRegion(path, pairs, cfg.shm_ring_bytes,
                                create=(self.rank == min(members)), timeout=cfg.timeout)
            self._regions.append(region)
            self._bind_rings(region)
        if cfg.transport == "shm":
            xpairs = [(a, b) for a in range(self.nranks) for b in range(self.nranks)
                      if a != b and self.node_ids[a] != self.node_ids[b]]
            if xpairs:
                path = os.path.join(cfg.shm_dir, f"diomp-{self.session}-x")
                region = _ShmRegion(path, xpairs, cfg.shm_ring_bytes,
                                    create=(self.rank == 0), timeout=cfg.timeout)
                self._regions.append(region)
                self._bind_rings(region)

    def _bind_rings(self, region: _ShmRegion):
        for (src, dst), ring in region.rings.items():
            if src == self.rank:
                self.peers[dst].shm_tx = ring
            elif dst == self.rank:
                self.peers[src].shm_rx = ring

    def attach_memory(self, gm):
        with self.lock:
            self._gm = gm

    # ------------------------------------------------------------------
    # public data-plane operations
    # ------------------------------------------------------------------

    def _channel_cap(self, peer: _Peer) -> int:
        if peer.shm_tx is not None:
            return min(MAX_FRAGMENT, peer.shm_tx.cap - HEADER_LEN - 64)
        return MAX_FRAGMENT

    def _check_peer(self, rank: int) -> _Peer:
        peer = self.peers.get(rank)
        if peer is None:
            raise TransportFailure(f"no such peer rank {rank}")
        if rank in self.dead_peers:
            raise TransportFailure(f"peer rank {rank} is gone")
        return peer

    def rma_put(self, dst_rank: int, device: int, offset: int,
                src_view: memoryview, target_key: tuple[int, int]) -> CompletionHandle:
        nbytes = len(src_view)
        if nbytes == 0:
            return CompletionHandle.completed(target_key)
        peer = self._check_peer(dst_rank)
        cap = self._channel_cap(peer)
        frags = _split(nbytes, cap)
        with self.lock:
            op_id = next(self._msg_ids)
            handle = CompletionHandle(self, op_id, target_key)
            op = _Op(handle, len(frags))
            self._ops[op_id] = op
            self._outstanding[target_key] += 1
            self.stats.issued_ops += 1
            pos = 0
            for fsize in frags:
                msg_id = op_id if pos == 0 else next(self._msg_ids)
                hdr = encode_header(Opcode.PUT, msg_id, self.rank, dst_rank,
                                    device, offset + pos, fsize)
                payload = bytes(src_view[pos:pos + fsize])
                self._frag[msg_id] = (op, None)
                self._enqueue(peer, Opcode.PUT, [memoryview(hdr), memoryview(payload)])
                self.stats.sent_frames[Opcode.PUT] += 1
                self.stats.sent_payload[Opcode.PUT] += fsize
                pos += fsize
            handle.state = HandleState.LocalDone
        self._wake()
        return handle

    def rma_get(self, src_rank: int, device: int, offset: int,
                dst_view: memoryview, target_key: tuple[int, int]) -> CompletionHandle:
        nbytes = len(dst_view)
        if nbytes == 0:
            return CompletionHandle.completed(target_key)
        peer = self._check_peer(src_rank)
        cap = self._channel_cap(peer)
        frags = _split(nbytes, cap)
        with self.lock:
            op_id = next(self._msg_ids)
            handle = CompletionHandle(self, op_id, target_key)
            op = _Op(handle, len(frags))
            self._ops[op_id] = op
            self._outstanding[target_key] += 1
            self.stats.issued_ops += 1
            pos = 0
            for fsize in frags:
                msg_id = op_id if pos == 0 else next(self._msg_ids)
                hdr = encode_header(Opcode.GET_REQ, msg_id, self.rank, src_rank,
                                    device, offset + pos, _GETREQ.size)
                self._frag[msg_id] = (op, dst_view[pos:pos + fsize])
                self._enqueue(peer, Opcode.GET_REQ,
                              [memoryview(hdr), memoryview(_GETREQ.pack(fsize))])
                self.stats.sent_frames[Opcode.GET_REQ] += 1
                self.stats.sent_payload[Opcode.GET_REQ] += _GETREQ.size
                pos += fsize
            handle.state = HandleState.LocalDone
        self._wake()
        return handle

    def cell_fetch(self, dst_rank: int, device: int, cell_offset: int,
                   dest: memoryview, target_key: tuple[int, int]) -> CompletionHandle:
        peer = self._check_peer(dst_rank)
        with self.lock:
            op_id = next(self._msg_ids)
            handle = CompletionHandle(self, op_id, target_key)
            op = _Op(handle, 1)
            self._ops[op_id] = op
            self._outstanding[target_key] += 1
            self.stats.issued_ops += 1
            hdr = encode_header(Opcode.CELL_FETCH, op_id, self.rank, dst_rank,
                                device, cell_offset, 0)
            self._frag[op_id] = (op, dest)
            self._enqueue(peer, Opcode.CELL_FETCH, [memoryview(hdr)])
            self.stats.sent_frames[Opcode.CELL_FETCH] += 1
            handle.state = HandleState.LocalDone
        self._wake()
        return handle

    # ------------------------------------------------------------------
    # control plane
    # ------------------------------------------------------------------

    def ctrl_send(self, dst_rank: int, tag: bytes, blob: bytes):
        if dst_rank == self.rank:
            with self.lock:
                self.ctrl_mailbox.setdefault(tag, deque()).append((self.rank, blob))
                self.cond.notify_all()
            return
        peer = self._check_peer(dst_rank)
        payload = struct.pack("<H", len(tag)) + tag + blob
        hdr = encode_header(Opcode.BOOTSTRAP, next(self._msg_ids), self.rank,
                            dst_rank, 0, 0, len(payload))
        with self.lock:
            self._enqueue_tcp(peer, [memoryview(hdr), memoryview(payload)])
            self.stats.sent_frames[Opcode.BOOTSTRAP] += 1
            self.stats.sent_payload[Opcode.BOOTSTRAP] += len(payload)
        self._wake()

    def ctrl_recv(self, tag: bytes, src_rank: int | None = None,
                  timeout: float | None = None) -> tuple[int, bytes]:
        result = []

        def pred():
            box = self.ctrl_mailbox.get(tag)
            if not box:
                return False
            if src_rank is None:
                result.append(box.popleft())
                return True
            for i, (src, blob) in enumerate(box):
                if src == src_rank:
                    del box[i]
                    result.append((src, blob))
                    return True
            return False

        watch = None if src_rank is None else {src_rank}
        self.wait_until(pred, timeout, f"control message {tag!r} never arrived",
                        watch_peers=watch)
        return result[0]

    def barrier_send(self, dst_rank: int, group_id: int, epoch: int, round_no: int):
        if dst_rank == self.rank:
            with self.lock:
                self.barrier_mailbox[(group_id, epoch, round_no, self.rank)] = True
                self.cond.notify_all()
            return
        peer = self._check_peer(dst_rank)
        payload = _BARRIER_PAYLOAD.pack(group_id, epoch, round_no)
        hdr = encode_header(Opcode.BARRIER, next(self._msg_ids), self.rank,
                            dst_rank, 0, 0, len(payload))
        with self.lock:
            self._enqueue_tcp(peer, [memoryview(hdr), memoryview(payload)])
            self.stats.sent_frames[Opcode.BARRIER] += 1
        self._wake()

    def barrier_wait(self, src_rank: int, group_id: int, epoch: int, round_no: int,
                     timeout: float | None = None):
        key = (group_id, epoch, round_no, src_rank)

        def pred():
            return self.barrier_mailbox.pop(key, False)

        self.wait_until(pred, timeout,
                        f"barrier message {key} never arrived",
                        watch_peers={src_rank}, peer_error=PeerFailure)

    # ------------------------------------------------------------------
    # progress machinery
    # ------------------------------------------------------------------

    def progress(self) -> int:
        """One non-blocking drain pass; returns handles retired."""
        with self.lock:
            return self._drain()

    def outstanding_toward(self, keys) -> int:
        with self.lock:
            return sum(self._outstanding[k] for k in keys)

    def wait_until(self, pred, timeout, what: str, watch_peers=None,
                   peer_error=TransportFailure):
        deadline = time.monotonic() + (timeout if timeout is not None
                                       else self.cfg.timeout)
        with self.cond:
            while True:
                self._drain()
                if pred():
                    return
                if watch_peers and (watch_peers & self.dead_peers):
                    raise peer_error(f"peer died while waiting: {what}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportFailure(f"timeout: {what}")
                self.cond.wait(min(remaining, 0.005))

    def _wake(self):
        try:
            os.write(self._wake_w, b"x")
        except (BlockingIOError, OSError):
            pass

    def _progress_loop(self):
        while not self._stop:
            rlist = [self._wake_r]
            rlist += [p.sock for p in self.peers.values()
                      if p.sock is not None and p.alive]
            has_shm = any(p.shm_rx is not None for p in self.peers.values())
            has_out = any(p.out or p.shm_out for p in self.peers.values())
            timeout = 0.0005 if (has_shm or has_out) else 0.05
            try:
                ready, _, _ = select.select(rlist, [], [], timeout)
            except (OSError, ValueError):
                ready = []
            if self._stop:
                return
            for fd in ready:
                if fd is self._wake_r:
                    try:
                        while os.read(self._wake_r, 4096):
                            pass
                    except (BlockingIOError, OSError):
                        pass
            with self.lock:
                self._drain()

    def _drain(self) -> int:
        """Must hold self.lock. Returns handles retired during this pass."""
        before = self.stats.retired_ops
        for peer in self.peers.values():
            if peer.sock is not None and peer.alive:
                self._drain_sock_rx(peer)
            if peer.out and peer.alive:
                self._flush_sock_tx(peer)
            if peer.shm_rx is not None:
                self._drain_ring_rx(peer)
            if peer.shm_out and peer.shm_tx is not None:
                self._flush_ring_tx(peer)
        retired = self.stats.retired_ops - before
        if retired:
            self.cond.notify_all()
        return retired

    # -- socket rx/tx ---------------------------------------------------

    def _drain_sock_rx(self, peer: _Peer):
        rx = peer.rx
        sock = peer.sock
        while True:
            if rx.needs_header():
                try:
                    n = sock.recv_into(memoryview(rx.header)[rx.header_fill:],
                                       HEADER_LEN - rx.header_fill)
                except (BlockingIOError, InterruptedError):
                    return
                except OSError:
                    self._peer_died(peer)
                    return
                if n == 0:
                    self._peer_died(peer)
                    return
                rx.header_fill += n
                if rx.header_fill < HEADER_LEN:
                    continue
                self._begin_frame(rx)
                if rx.payload_len == 0:
                    self._dispatch(peer, rx)
                    continue
            # payload phase
            want = rx.payload_len - rx.payload_fill
            target = rx.sink[rx.payload_fill:rx.payload_len]
            try:
                n = sock.recv_into(target, want)
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                self._peer_died(peer)
                return
            if n == 0:
                self._peer_died(peer)
                return
            rx.payload_fill += n
            if rx.payload_fill == rx.payload_len:
                self._dispatch(peer, rx)

    def _flush_sock_tx(self, peer: _Peer):
        sock = peer.sock
        while peer.out:
            view = peer.out[0]
            try:
                n = sock.send(view[peer.out_pos:])
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                self._peer_died(peer)
                return
            peer.out_pos += n
            if peer.out_pos == len(view):
                peer.out.popleft()
                peer.out_pos = 0
            else:
                return

    # -- ring rx/tx -------------------------------------------------------

    def _drain_ring_rx(self, peer: _Peer):
        rx = peer.shm_rx_machine
        ring = peer.shm_rx
        while True:
            avail = ring.readable()
            if avail == 0:
                return
            if rx.needs_header():
                take = min(avail, HEADER_LEN - rx.header_fill)
                ring.read_into(memoryview(rx.header)[rx.header_fill:
                                                     rx.header_fill + take], take)
                rx.header_fill += take
                if rx.header_fill < HEADER_LEN:
                    continue
                self._begin_frame(rx)
                if rx.payload_len == 0:
                    self._dispatch(peer, rx)
                continue
            take = min(avail, rx.payload_len - rx.payload_fill)
            ring.read_into(rx.sink[rx.payload_fill:rx.payload_fill + take], take)
            rx.payload_fill += take
            if rx.payload_fill == rx.payload_len:
                self._dispatch(peer, rx)

    def _flush_ring_tx(self, peer: _Peer):
        ring = peer.shm_tx
        while peer.shm_out:
            views = peer.shm_out[0]
            total = sum(len(v) for v in views)
            if ring.free_space() < total:
                return
            ring.write(views)
            peer.shm_out.popleft()

    # -- frame handling ----------------------------------------------------

    def _begin_frame(self, rx: _RxMachine):
        rx.fields = decode_header(rx.header)
        opcode, msg_id, src, dst, device, offset, length = rx.fields
        rx.payload_len = length
        rx.payload_fill = 0
        rx.scratch = None
        if length == 0:
            rx.sink = None
            return
        if opcode == Opcode.PUT:
            sink = self._put_sink(device, offset, length)
            if sink is not None:
                rx.sink = sink
                return
        elif opcode == Opcode.GET_RESP:
            entry = self._frag.get(msg_id)
            status = Status(offset) if offset in Status._value2member_map_ else Status.INTERNAL
            if entry is not None and status is Status.OK and entry[1] is not None \
                    and len(entry[1]) == length:
                rx.sink = entry[1]
                return
        rx.scratch = bytearray(length)
        rx.sink = memoryview(rx.scratch)

    def _put_sink(self, device: int, offset: int, length: int):
        if self._gm is None:
            return None
        try:
            self._gm.check_rma_range(device, offset, length)
        except InvalidAddress:
            return None
        return self._gm.view(device, offset, length)

    def _dispatch(self, peer: _Peer, rx: _RxMachine):
        opcode, msg_id, src, dst, device, offset, length = rx.fields
        scratch = rx.scratch
        direct = rx.scratch is None and rx.sink is not None
        rx.reset()
        self.stats.recv_frames[opcode] += 1
        self.stats.recv_payload[opcode] += length

        if opcode == Opcode.PUT:
            self.stats.serve_thread_ids.add(threading.get_ident())
            status = Status.OK if direct or length == 0 else Status.INVALID_ADDRESS
            hdr = encode_header(Opcode.ACK, msg_id, self.rank, src, device,
                                int(status), 0)
            self._reply(peer, [memoryview(hdr)])
            self.stats.sent_frames[Opcode.ACK] += 1

        elif opcode == Opcode.GET_REQ:
            self.stats.serve_thread_ids.add(threading.get_ident())
            want = _GETREQ.unpack(bytes(scratch))[0] if scratch else 0
            payload, status = self._read_range(device, offset, want)
            hdr = encode_header(Opcode.GET_RESP, msg_id, self.rank, src, device,
                                int(status), len(payload))
            self._reply(peer, [memoryview(hdr), memoryview(payload)])
            self.stats.sent_frames[Opcode.GET_RESP] += 1
            self.stats.sent_payload[Opcode.GET_RESP] += len(payload)

        elif opcode == Opcode.CELL_FETCH:
            self.stats.serve_thread_ids.add(threading.get_ident())
            payload, status = self._read_range(device, offset, 32)
            hdr = encode_header(Opcode.GET_RESP, msg_id, self.rank, src, device,
                                int(status), len(payload))
            self._reply(peer, [memoryview(hdr), memoryview(payload)])
            self.stats.sent_frames[Opcode.GET_RESP] += 1
            self.stats.sent_payload[Opcode.GET_RESP] += len(payload)

        elif opcode == Opcode.ACK:
            status = Status(offset) if offset in Status._value2member_map_ \
                else Status.INTERNAL
            self._complete_fragment(msg_id, status)

        elif opcode == Opcode.GET_RESP:
            status = Status(offset) if offset in Status._value2member_map_ \
                else Status.INTERNAL
            self._complete_fragment(msg_id, status)

        elif opcode == Opcode.BARRIER:
            g, e, r = _BARRIER_PAYLOAD.unpack(bytes(scratch))
            self.barrier_mailbox[(g, e, r, src)] = True
            self.cond.notify_all()

        elif opcode == Opcode.BOOTSTRAP:
            taglen = struct.unpack_from("<H", scratch, 0)[0]
            tag = bytes(scratch[2:2 + taglen])
            blob = bytes(scratch[2 + taglen:])
            self.ctrl_mailbox.setdefault(tag, deque()).append((src, blob))
            self.cond.notify_all()

    def _read_range(self, device: int, offset: int, nbytes: int):
        if self._gm is None:
            return b"", Status.INTERNAL
        try:
            self._gm.check_rma_range(device, offset, nbytes)
        except InvalidAddress:
            return b"", Status.INVALID_ADDRESS
        return bytes(self._gm.view(device, offset, nbytes)), Status.OK

    def _reply(self, peer: _Peer, views):
        # Responses travel back over the channel class the request used.
        if peer.shm_tx is not None:
            peer.shm_out.append(views)
            self._flush_ring_tx(peer)
        else:
            self._enqueue_tcp(peer, views)

    def _complete_fragment(self, msg_id: int, status: Status):
        entry = self._frag.pop(msg_id, None)
        if entry is None:
            return
        op, _ = entry
        if status is not Status.OK and op.failed is None:
            op.failed = status
        op.done += 1
        if op.done == op.expected:
            handle = op.handle
            self._ops.pop(handle.op_id, None)
            self._outstanding[handle.target_key] -= 1
            if op.failed is not None:
                handle.error = _STATUS_ERRORS.get(op.failed, TransportFailure)(
                    f"remote completion failed with {op.failed.name} "
                    f"toward {handle.target_key}")
                handle.state = HandleState.Failed
                self.failed_ops.append((handle.target_key, handle.error))
            else:
                handle.state = HandleState.RemoteDone
            handle.completed_at = time.perf_counter()
            self.stats.retired_ops += 1

    def _enqueue(self, peer: _Peer, opcode: Opcode, views):
        if opcode in (Opcode.PUT, Opcode.GET_REQ, Opcode.GET_RESP,
                      Opcode.CELL_FETCH, Opcode.ACK) and peer.shm_tx is not None:
            peer.shm_out.append(views)
            self._flush_ring_tx(peer)
        else:
            self._enqueue_tcp(peer, views)

    def _enqueue_tcp(self, peer: _Peer, views):
        if peer.sock is None:
            raise TransportFailure(f"no socket to rank {peer.rank}")
        peer.out.extend(views)
        self._flush_sock_tx(peer)

    def _peer_died(self, peer: _Peer):
        if not peer.alive:
            return
        peer.alive = False
        self.dead_peers.add(peer.rank)
        for msg_id in [m for m, (op, _) in self._frag.items()
                       if op.handle.target_key[0] == peer.rank]:
            self._complete_fragment(msg_id, Status.INTERNAL)
        self.cond.notify_all()

    # ------------------------------------------------------------------

    def close(self):
        self._stop = True
        self._wake()
        if self._thread is not None:
            self._thread.join(timeout=10)
            self._thread = None
        with self.lock:
            for peer in self.peers.values():
                if peer.sock is not None:
                    try:
                        peer.sock.close()
                    except OSError:
                        pass
                    peer.sock = None
                peer.shm_tx = peer.shm_rx = None
            for region in self._regions:
                region.close()
            self._regions.clear()
        if self._listen is not None:
            self._listen.close()
            self._listen = None
        for fd in (self._wake_r, self._wake_w):
            try:
                os.close(fd)
            except OSError:
                pass


def _split(nbytes: int, cap: int) -> list[int]:
    out = []
    while nbytes > 0:
        take = min(nbytes, cap)
        out.append(take)
        nbytes -= take
    return out


def _recv_line(sock: socket.socket, deadline: float) -> bytes:
    sock.settimeout(1.0)
    buf = bytearray()
    while not buf.endswith(b"\n"):
        if time.monotonic() > deadline:
            raise HandshakeTimeout("rendezvous peer stalled")
        try:
            chunk = sock.recv(4096)
        except socket.timeout:
            continue
        if not chunk:
            raise HandshakeTimeout("rendezvous peer closed early")
        buf += chunk
    return bytes(buf)


def _recv_exact(sock: socket.socket, n: int, deadline: float) -> bytes:
    sock.settimeout(1.0)
    buf = bytearray()
    while len(buf) < n:
        if time.monotonic() > deadline:
            raise HandshakeTimeout("mesh peer stalled")
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            continue
        if not chunk:
            raise HandshakeTimeout("mesh peer closed early")
        buf += chunk
    return bytes(buf)
