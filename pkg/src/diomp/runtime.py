"""Runtime core: rank binding, groups, scoped barrier/fence, RMA entry points.

One Runtime per process (the public init() enforces the singleton; the
in-process emulation used by tests and the selftest constructs Runtime
directly, one per simulated rank). The runtime composes:

  * the transport engine (mesh + progress thread),
  * the per-device global memory state,
  * per-device stream pools,
  * the group table and the per-group outstanding-work ledgers.

Collective calls (allocation, free, group creation/split, communicator
bootstrap) exchange a small digest over the control plane before mutating
local state, so rank disagreement surfaces as CollectiveMismatch instead of
silent divergence. Group-scoped barrier uses a dissemination pattern over
the member ranks: O(log n) rounds, no coordinator.

fence(group) implements caller-local completion: it drives a single hybrid
polling loop that alternates between transport completions and stream
events tied to transfers toward the group, returning once both ledgers are
empty. A collective flush is fence on every member plus barrier.
"""

from __future__ import annotations

import hashlib
import itertools
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .config import LaunchConfig, ResolvedConfig, resolve_from_env
from .errors import (CollectiveMismatch, DiompError, InvalidAddress, KindMismatch,
                     NullPayload, StaleCell, StaleGroup, StreamMismatch,
                     TransportFailure, UnknownEndpoint)
from .global_memory import (CELL_BYTES, AllocMode, AllocRecord, GlobalAddress,
                            GlobalMemory, IndirectionCell, TransferKind)
from .streams import Stream, StreamEvent, StreamPool
from .topology import (Endpoint, PathKind, TopologyMap, classify_path,
                       empty_peer_matrix, full_peer_matrix)
from .transport import CompletionHandle, HandleState, TransportEngine

WORLD_GROUP_ID = 0
COLLECTIVE_CHUNK = 1024 * 1024


def _collective_chunk(segment_bytes: int) -> int:
    # 1 MiB at the default segment size; smaller segments scale the chunk
    # down so the two scratch slots still fit the asymmetric quarter.
    return min(COLLECTIVE_CHUNK, segment_bytes // 16)

_live_runtime: "Runtime | None" = None
_live_lock = threading.Lock()


@dataclass(frozen=True)
class Group:
    """Ordered, duplicate-free set of device endpoints."""

    id: int
    members: tuple[Endpoint, ...]
    parent: int | None = None

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(sorted({ep.rank for ep in self.members}))

    def __len__(self):
        return len(self.members)


class StreamedHandle:
    """Handle for a transfer submitted through a stream; binds the real
    transport handle once the stream task has issued it."""

    def __init__(self, event: StreamEvent, target_key):
        self.event = event
        self.target_key = target_key
        self.inner: CompletionHandle | None = None

    @property
    def state(self):
        if self.inner is None:
            return HandleState.Pending
        return self.inner.state

    def wait(self, timeout: float | None = None):
        if not self.event.wait(timeout):
            raise TransportFailure("stream task never ran")
        assert self.inner is not None
        return self.inner.wait(timeout)


def _hash_id(*parts) -> int:
    h = hashlib.sha256(repr(parts).encode()).digest()
    val = int.from_bytes(h[:8], "little")
    return val or 1


class Runtime:
    """Live per-rank runtime handle."""

    def __init__(self, cfg: ResolvedConfig):
        self.cfg = cfg
        self.rank = cfg.rank
        self.nranks = cfg.nranks
        self.finalized = False
        self._lock = threading.RLock()

        self.engine = TransportEngine(cfg)
        self.engine.connect()

        peer = full_peer_matrix(cfg.devices_per_rank) if cfg.peer_mode == "full" \
            else empty_peer_matrix(cfg.devices_per_rank)
        self.topology = TopologyMap(cfg.nranks, cfg.devices_per_rank,
                                    tuple(self.engine.node_ids),
                                    tuple(self.engine.process_ids), peer)

        self.gm = GlobalMemory(cfg.segment, cfg.devices_per_rank, cfg.rank)
        self.engine.attach_memory(self.gm)

        self.pools = [StreamPool(d, cfg.max_active_streams, cfg.sim_task_us)
                      for d in range(cfg.devices_per_rank)]

        # Internal collective scratch lives in the asymmetric region (top of
        # the segment) so user-visible symmetric offsets start at 0. The
        # allocation sequence is identical on every rank and device, hence
        # the offset is a single constant.
        self.collective_chunk = _collective_chunk(cfg.segment.segment_bytes)
        scratch_bytes = 2 * self.collective_chunk + 4096
        offs = set()
        for d in range(cfg.devices_per_rank):
            heap = self.gm._heaps[d]
            off = heap.asym.alloc(scratch_bytes)
            heap.add_record(AllocRecord(GlobalAddress(self.rank, d, off),
                                        heap.asym.block_size(scratch_bytes),
                                        AllocMode.Asymmetric,
                                        requested=scratch_bytes))
            offs.add(off)
        assert len(offs) == 1
        self.scratch_offset = offs.pop()

        world = tuple(sorted(self.topology.endpoints()))
        self._groups: dict[int, Group] = {
            WORLD_GROUP_ID: Group(WORLD_GROUP_ID, world)}
        self._dead_groups: set[int] = set()
        self._group_ordinals: Counter = Counter()
        self._barrier_epochs: Counter = Counter()
        self._world_seq = itertools.count()
        self._per_group_seq: Counter = Counter()
        self._stream_ledger: list[tuple[StreamEvent, tuple[int, int]]] = []
        self.comm_cache: dict[int, object] = {}
        self.bootstrap_count = 0

        self.barrier(self.world)

    # ------------------------------------------------------------------
    # groups
    # ------------------------------------------------------------------

    @property
    def world(self) -> Group:
        return self._groups[WORLD_GROUP_ID]

    def endpoint(self, rank: int | None = None, device: int = 0) -> Endpoint:
        return self.topology.endpoint(self.rank if rank is None else rank, device)

    def _check_group(self, group: Group) -> Group:
        if group.id in self._dead_groups or group.id not in self._groups:
            raise StaleGroup(f"group {group.id:#x} is not live")
        return self._groups[group.id]

    def _normalize_members(self, members) -> tuple[Endpoint, ...]:
        seen = {}
        for ep in members:
            ep = self.topology.endpoint(ep.rank, ep.device)
            seen[ep.key()] = ep
        if not seen:
            raise UnknownEndpoint("group membership must be nonempty")
        return tuple(sorted(seen.values()))

    def group_create(self, members) -> Group:
        members = self._normalize_members(members)
        ranks = tuple(sorted({ep.rank for ep in members}))
        if self.rank not in ranks:
            raise CollectiveMismatch("group_create is collective among owning ranks")
        key = ("create", members)
        ordinal = self._group_ordinals[key]
        self._group_ordinals[key] += 1
        digest = repr(("create", members, ordinal)).encode()
        self._ctrl_allgather(ranks, b"grp:%d:%d" % (_hash_id(key), ordinal),
                             digest, must_match=True)
        gid = _hash_id("create", members, ordinal)
        group = Group(gid, members)
        self._groups[gid] = group
        return group

    def group_merge(self, g1: Group, g2: Group) -> Group:
        self._check_group(g1)
        self._check_group(g2)
        members = tuple(sorted({ep.key(): ep for g in (g1, g2)
                                for ep in g.members}.values()))
        key = ("merge", g1.id, g2.id, members)
        ordinal = self._group_ordinals[key]
        self._group_ordinals[key] += 1
        gid = _hash_id("merge", g1.id, g2.id, members, ordinal)
        group = Group(gid, members, parent=g1.id)
        self._groups[gid] = group
        return group

    def group_split(self, group: Group, color: int, key: int) -> Group:
        group = self._check_group(group)
        ranks = group.ranks
        if self.rank not in ranks:
            raise CollectiveMismatch("group_split is collective over the group")
        seq = self._per_group_seq[("split", group.id)]
        self._per_group_seq[("split", group.id)] += 1
        blob = struct.pack("<qq", color, key)
        gathered = self._ctrl_allgather(ranks, b"spl:%d:%d" % (group.id, seq), blob)
        colors = {r: struct.unpack("<qq", b) for r, b in gathered}
        mine = colors[self.rank][0]
        members = [ep for ep in group.members if colors[ep.rank][0] == mine]
        members.sort(key=lambda ep: (colors[ep.rank][1], ep.rank, ep.device))
        gid = _hash_id("split", group.id, mine, tuple(members), seq)
        sub = Group(gid, tuple(members), parent=group.id)
        self._groups[gid] = sub
        return sub

    def group_free(self, group: Group):
        if group.id == WORLD_GROUP_ID:
            raise StaleGroup("cannot free the world group")
        self._check_group(group)
        self._dead_groups.add(group.id)
        self.comm_cache.pop(group.id, None)

    # ------------------------------------------------------------------
    # control-plane collectives
    # ------------------------------------------------------------------

    def _ctrl_allgather(self, ranks, tag: bytes, blob: bytes,
                        must_match: bool = False) -> list[tuple[int, bytes]]:
        """Gather blobs from `ranks` to the lowest rank and redistribute."""
        ranks = tuple(ranks)
        root = ranks[0]
        eng = self.engine
        if self.rank == root:
            blobs = {root: blob}
            for r in ranks[1:]:
                _, b = eng.ctrl_recv(tag, src_rank=r, timeout=self.cfg.timeout)
                blobs[r] = b
            packed = _pack([blobs[r] for r in ranks])
            for r in ranks[1:]:
                eng.ctrl_send(r, tag + b"/r", packed)
        else:
            eng.ctrl_send(root, tag, blob)
            _, packed = eng.ctrl_recv(tag + b"/r", src_rank=root,
                                      timeout=self.cfg.timeout)
        items = list(zip(ranks, _unpack(packed)))
        if must_match and any(b != blob for _, b in items):
            raise CollectiveMismatch(
                f"collective arguments disagree across ranks for {tag!r}")
        return items

    def _world_collective(self, digest: bytes):
        seq = next(self._world_seq)
        tag = b"w:%d" % seq
        self._ctrl_allgather(tuple(range(self.nranks)), tag, digest,
                             must_match=True)

    # ------------------------------------------------------------------
    # memory
    # ------------------------------------------------------------------

    def alloc_symmetric(self, size: int, device: int = 0,
                        stream: Stream | None = None) -> AllocRecord:
        """Collective over the world group; identical (size, device) everywhere.

        Returns only once the allocation is live on every rank, so the
        address is immediately usable as an RMA target.
        """
        self._world_collective(repr(("alloc_sym", size, device)).encode())
        rec = self.gm.local_alloc_symmetric(
            size, device, stream_id=stream.id if stream is not None else None)
        self.barrier(self.world)
        return rec

    def alloc_asymmetric(self, local_size: int, device: int = 0) -> IndirectionCell:
        """Collective; sizes may differ per rank (0 binds a null payload)."""
        self._world_collective(repr(("alloc_asym", device)).encode())
        cell = self.gm.local_alloc_asymmetric(local_size, device)
        self.barrier(self.world)
        return cell

    def free(self, obj):
        """Collective free of a symmetric record or an indirection cell."""
        if isinstance(obj, IndirectionCell):
            self._world_collective(repr(
                ("free_cell", obj.cell_addr.device, obj.cell_addr.offset)).encode())
            self.gm.local_free_cell(obj)
        elif isinstance(obj, AllocRecord):
            self._world_collective(repr(
                ("free", obj.mode.value, obj.addr.device, obj.addr.offset,
                 obj.size)).encode())
            self.gm.local_free(obj)
        else:
            raise TypeError(f"cannot free {type(obj).__name__}")
        self.barrier(self.world)

    def translate(self, local: GlobalAddress, target_rank: int) -> GlobalAddress:
        if not 0 <= target_rank < self.nranks:
            raise UnknownEndpoint(f"rank {target_rank}")
        return self.gm.translate(local, target_rank)

    def resolve_cell(self, cell: IndirectionCell, target_rank: int) -> GlobalAddress:
        """Two-step remote access, step one: find the peer's payload address.

        Cache hits (matching generation) answer without wire traffic; the
        caller performs the data transfer as step two.
        """
        if not 0 <= target_rank < self.nranks:
            raise UnknownEndpoint(f"rank {target_rank}")
        if not cell.live or self.gm.cell_generation(cell) != cell.generation:
            raise StaleCell(f"cell at {cell.cell_addr} was freed or rebound")
        device = cell.cell_addr.device
        if target_rank == self.rank:
            off, size, gen = self.gm.read_local_cell(cell)
            if size == 0:
                raise NullPayload(f"cell at {cell.cell_addr} binds a zero-byte payload")
            return GlobalAddress(self.rank, device, off)
        hit = self.gm.cache_lookup(cell, target_rank)
        if hit is not None:
            addr, size, _gen = hit
            if size == 0:
                raise NullPayload(f"cell at {cell.cell_addr} binds a zero-byte "
                                  f"payload on rank {target_rank}")
            return addr
        dest = bytearray(CELL_BYTES)
        handle = self.engine.cell_fetch(target_rank, device, cell.cell_addr.offset,
                                        memoryview(dest), (target_rank, device))
        try:
            handle.wait(self.cfg.timeout)
        except InvalidAddress as e:
            raise StaleCell(f"cell at {cell.cell_addr} no longer exists on "
                            f"rank {target_rank}") from e
        return self.gm.resolve_from_bytes(cell, target_rank, dest)

    # ------------------------------------------------------------------
    # RMA
    # ------------------------------------------------------------------

    def _classify(self, local_device: int, remote: GlobalAddress) -> PathKind:
        a = self.topology.endpoint(self.rank, local_device)
        b = self.topology.endpoint(remote.rank, remote.device)
        return classify_path(a, b, self.topology)

    def _stream_check(self, rec: AllocRecord | None, stream: Stream | None):
        if rec is not None and rec.stream_id is not None:
            if stream is None or stream.id != rec.stream_id:
                raise StreamMismatch(
                    f"allocation at {rec.addr} is bound to stream {rec.stream_id}")

    def _receiving_record(self, addr: GlobalAddress, nbytes: int):
        if addr.rank == self.rank:
            return self.gm.check_rma_range(addr.device, addr.offset, nbytes)
        return self.gm.mirror_check(addr.device, addr.offset, nbytes)

    def put(self, dst: GlobalAddress, src, nbytes: int | None = None,
            kind: TransferKind = TransferKind.H2D,
            stream: Stream | None = None):
        """One-sided write of local bytes into dst. Asynchronous: returns a
        completion handle; fence or handle.wait() gives remote completion."""
        if not kind.dst_is_device:
            raise KindMismatch(f"put destination is device-resident; kind {kind.value}")
        if kind is TransferKind.D2D:
            if not isinstance(src, GlobalAddress):
                raise KindMismatch("D2D put needs a local device address as source")
            if src.rank != self.rank:
                raise KindMismatch("put source must be local")
            if nbytes is None:
                raise ValueError("D2D put requires nbytes")
            local_device = src.device
        else:
            if isinstance(src, GlobalAddress):
                raise KindMismatch(f"{kind.value} put needs a host buffer as source")
            src = _as_view(src)
            if nbytes is None:
                nbytes = len(src)
            local_device = dst.device
        b = self.topology.endpoint(dst.rank, dst.device)
        key = (b.rank, b.device)
        if nbytes == 0:
            return CompletionHandle.completed(key)
        if kind is TransferKind.D2D:
            self.gm.check_rma_range(src.device, src.offset, nbytes)
            src_view = self.gm.view(src.device, src.offset, nbytes)
        else:
            if len(src) < nbytes:
                raise ValueError("source buffer shorter than nbytes")
            src_view = src[:nbytes]
        rec = self._receiving_record(dst, nbytes)
        self._stream_check(rec, stream)
        path = self._classify(local_device, dst)

        def issue() -> CompletionHandle:
            if path in (PathKind.IntraProcess, PathKind.PeerFabric):
                self.gm.check_rma_range(dst.device, dst.offset, nbytes)
                self.gm.view(dst.device, dst.offset, nbytes)[:] = src_view
                st = self.engine.stats
                st.direct_puts += 1
                st.direct_put_bytes += nbytes
                return CompletionHandle.completed(key)
            return self.engine.rma_put(dst.rank, dst.device, dst.offset,
                                       src_view, key)

        return self._maybe_stream(issue, stream, key)

    def get(self, src: GlobalAddress, dst, nbytes: int | None = None,
            kind: TransferKind = TransferKind.D2H,
            stream: Stream | None = None):
        """One-sided read of src into a local buffer; completion means dst
        holds a snapshot taken no earlier than the call."""
        if not kind.src_is_device:
            raise KindMismatch(f"get source is device-resident; kind {kind.value}")
        if kind is TransferKind.D2D:
            if not isinstance(dst, GlobalAddress):
                raise KindMismatch("D2D get needs a local device address as destination")
            if dst.rank != self.rank:
                raise KindMismatch("get destination must be local")
            if nbytes is None:
                raise ValueError("D2D get requires nbytes")
            local_device = dst.device
        else:
            if isinstance(dst, GlobalAddress):
                raise KindMismatch(f"{kind.value} get needs a host buffer as destination")
            dst = _as_view(dst, writable=True)
            if nbytes is None:
                nbytes = len(dst)
            local_device = src.device
        b = self.topology.endpoint(src.rank, src.device)
        key = (b.rank, b.device)
        if nbytes == 0:
            return CompletionHandle.completed(key)
        if kind is TransferKind.D2D:
            rec = self.gm.check_rma_range(dst.device, dst.offset, nbytes)
            dst_view = self.gm.view(dst.device, dst.offset, nbytes)
        else:
            rec = None
            if len(dst) < nbytes:
                raise ValueError("destination buffer shorter than nbytes")
            dst_view = dst[:nbytes]
        self._stream_check(rec, stream)
        self._receiving_record(src, nbytes)   # mirror/live check on the source
        path = self._classify(local_device, src)

        def issue() -> CompletionHandle:
            if path in (PathKind.IntraProcess, PathKind.PeerFabric):
                self.gm.check_rma_range(src.device, src.offset, nbytes)
                dst_view[:] = self.gm.view(src.device, src.offset, nbytes)
                st = self.engine.stats
                st.direct_gets += 1
                st.direct_get_bytes += nbytes
                return CompletionHandle.completed(key)
            return self.engine.rma_get(src.rank, src.device, src.offset,
                                       dst_view, key)

        return self._maybe_stream(issue, stream, key)

    def _maybe_stream(self, issue, stream: Stream | None, key):
        if stream is None:
            return issue()
        proxy = None

        def task():
            proxy.inner = issue()

        event = stream.submit(task)
        proxy = StreamedHandle(event, key)
        with self._lock:
            self._stream_ledger.append((event, key))
        return proxy

    def progress(self) -> int:
        return self.engine.progress()

    # ------------------------------------------------------------------
    # synchronization
    # ------------------------------------------------------------------

    def barrier(self, group: Group):
        """Returns once every member rank has entered; non-members unaffected."""
        group = self._check_group(group)
        ranks = group.ranks
        if self.rank not in ranks:
            raise UnknownEndpoint(f"rank {self.rank} owns no endpoint in "
                                  f"group {group.id:#x}")
        if len(ranks) == 1:
            return
        epoch = self._barrier_epochs[group.id]
        self._barrier_epochs[group.id] += 1
        idx = ranks.index(self.rank)
        k = len(ranks)
        step, round_no = 1, 0
        while step < k:
            self.engine.barrier_send(ranks[(idx + step) % k], group.id,
                                     epoch, round_no)
            self.engine.barrier_wait(ranks[(idx - step) % k], group.id,
                                     epoch, round_no, timeout=self.cfg.timeout)
            step <<= 1
            round_no += 1

    def _streams_drained(self, keys) -> bool:
        with self._lock:
            kept = []
            for event, key in self._stream_ledger:
                if not event.completed:
                    kept.append((event, key))
            pending = any(key in keys for _, key in kept)
            self._stream_ledger = kept
            return not pending

    def outstanding_rma(self, group: Group) -> int:
        keys = {ep.key() for ep in group.members}
        return self.engine.outstanding_toward(keys)

    def outstanding_stream_events(self, group: Group) -> int:
        keys = {ep.key() for ep in group.members}
        with self._lock:
            return sum(1 for ev, key in self._stream_ledger
                       if key in keys and not ev.completed)

    def fence(self, group: Group):
        """Hybrid polling loop: alternates transport completions and stream
        events until all of the caller's RMA toward the group is remotely
        complete and the associated stream events have fired."""
        group = self._check_group(group)
        keys = {ep.key() for ep in group.members}
        deadline = time.monotonic() + self.cfg.timeout
        eng = self.engine
        while True:
            eng.progress()
            self._raise_group_failures(keys)
            streams_done = self._streams_drained(keys)
            rma_done = eng.outstanding_toward(keys) == 0
            if streams_done and rma_done:
                return
            if time.monotonic() > deadline:
                raise TransportFailure(
                    f"fence on group {group.id:#x} did not drain: "
                    f"{eng.outstanding_toward(keys)} RMA, "
                    f"{self.outstanding_stream_events(group)} stream events")
            with eng.cond:
                eng.cond.wait(0.002)

    def _raise_group_failures(self, keys):
        eng = self.engine
        with eng.lock:
            for i, (key, err) in enumerate(eng.failed_ops):
                if key in keys:
                    del eng.failed_ops[i]
                    raise err

    # ------------------------------------------------------------------

    def finalize(self):
        """Implicit world fence + barrier, then teardown. Idempotent."""
        if self.finalized:
            return
        try:
            self.fence(self.world)
            self.barrier(self.world)
        except (TransportFailure, DiompError):
            pass
        for pool in self.pools:
            pool.shutdown()
        self.engine.close()
        self.finalized = True
        global _live_runtime
        with _live_lock:
            if _live_runtime is self:
                _live_runtime = None


def _as_view(buf, writable: bool = False) -> memoryview:
    if isinstance(buf, np.ndarray):
        view = memoryview(buf).cast("B")
    else:
        view = memoryview(buf)
        if view.format != "B":
            view = view.cast("B")
    if writable and view.readonly:
        raise ValueError("destination buffer is read-only")
    return view


def _pack(blobs: list[bytes]) -> bytes:
    out = [struct.pack("<I", len(blobs))]
    for b in blobs:
        out.append(struct.pack("<I", len(b)))
        out.append(b)
    return b"".join(out)


def _unpack(packed: bytes) -> list[bytes]:
    n = struct.unpack_from("<I", packed, 0)[0]
    out, pos = [], 4
    for _ in range(n):
        ln = struct.unpack_from("<I", packed, pos)[0]
        pos += 4
        out.append(packed[pos:pos + ln])
        pos += ln
    return out


def init(config: LaunchConfig | None = None) -> Runtime:
    """Create the process's runtime from launcher environment + overrides."""
    global _live_runtime
    with _live_lock:
        if _live_runtime is not None:
            raise DiompError("runtime already initialized in this process")
    rt = Runtime(resolve_from_env(config))
    with _live_lock:
        if _live_runtime is not None:   # lost a race; should not happen
            rt.finalize()
            raise DiompError("runtime already initialized in this process")
        _live_runtime = rt
    return rt


def finalize(rt: Runtime | None = None):
    global _live_runtime
    target = rt
    if target is None:
        with _live_lock:
            target = _live_runtime
    if target is not None:
        target.finalize()
