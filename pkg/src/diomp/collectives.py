"""Group-scoped collectives over device endpoints.

A Communicator wraps a group with a bootstrap-derived context: the lowest
participating rank generates a random 128-bit UniqueId and pushes it to the
other member ranks over the CPU-side control plane; the ring order is the
member order rotated to start at that root.

All three collectives run a ring pipeline in 1 MiB chunks through a small
per-device scratch area (two data slots, reserved at init), entirely on top
of one-sided puts: the sender deposits a chunk in the successor's slot,
completes it, then completes an 8-byte token put that the receiver polls in
its own arena. Slot reuse is credit-gated by reverse ack tokens, two chunks
in flight per edge. Tokens hash (uid, collective seq, edge, chunk), so
traffic from earlier collectives can never satisfy a later wait.

Combination orders are fixed and documented so float results are bitwise
reproducible and rank-layout independent:

  * reduce: the accumulator travels the ring from the root, so the root
    receives ((v_root op v_r+1) op ...) op v_r-1 -- a left fold in ring
    order from the root.
  * allreduce: ring reduce-scatter then ring allgather. Block b is left-
    folded starting at ring position b (acc = v_b, then op v_b+1, ...),
    finishing at position (b-1) mod k.

Collectives are addressed per endpoint: a buffer address stands for
(member.rank, member.device, buffer.offset) at every member, so the same
offset must be live on every member's device.
"""

from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import (InvalidAddress, RootOutOfRange, StaleGroup, TypeMismatch)
from .global_memory import GlobalAddress, TransferKind
from .runtime import Group, Runtime
from .topology import Endpoint

def _flag_off(chunk: int) -> int:
    return 2 * chunk                    # two u64 data tokens


def _ack_off(chunk: int) -> int:
    return 2 * chunk + 16               # two u64 credit tokens


class ReduceKind(enum.Enum):
    Sum = "sum"
    Min = "min"
    Max = "max"


class ElementType(enum.Enum):
    f32 = "f32"
    f64 = "f64"
    i32 = "i32"
    i64 = "i64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype({"f32": "<f4", "f64": "<f8",
                         "i32": "<i4", "i64": "<i8"}[self.value])


@dataclass(frozen=True)
class ReduceOp:
    kind: ReduceKind
    etype: ElementType

    @property
    def ufunc(self):
        return {ReduceKind.Sum: np.add, ReduceKind.Min: np.minimum,
                ReduceKind.Max: np.maximum}[self.kind]


class UniqueId:
    """128-bit random token shared by all members of a communicator."""

    __slots__ = ("value",)

    def __init__(self, value: bytes):
        assert len(value) == 16
        self.value = value

    @classmethod
    def generate(cls) -> "UniqueId":
        return cls(os.urandom(16))

    def __eq__(self, other):
        return isinstance(other, UniqueId) and self.value == other.value

    def __hash__(self):
        return hash(self.value)


class Communicator:
    def __init__(self, rt: Runtime, group: Group, uid: UniqueId,
                 ring: tuple[Endpoint, ...]):
        self.rt = rt
        self.group = group
        self.uid = uid
        self.ring = ring
        self.my_positions = tuple(i for i, ep in enumerate(ring)
                                  if ep.rank == rt.rank)
        self._seq = 0

    @property
    def size(self) -> int:
        return len(self.ring)

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq


def bootstrap(rt: Runtime, group: Group) -> Communicator:
    """Collective over the group's ranks; fresh UniqueId per call."""
    group = rt._check_group(group)
    ranks = group.ranks
    if rt.rank not in ranks:
        raise StaleGroup(f"rank {rt.rank} owns no endpoint in group {group.id:#x}")
    seq = rt._per_group_seq[("boot", group.id)]
    rt._per_group_seq[("boot", group.id)] += 1
    tag = b"uid:%d:%d" % (group.id, seq)
    root = ranks[0]
    if rt.rank == root:
        uid = UniqueId.generate()
        for r in ranks[1:]:
            rt.engine.ctrl_send(r, tag, uid.value)
    else:
        _, blob = rt.engine.ctrl_recv(tag, src_rank=root, timeout=rt.cfg.timeout)
        uid = UniqueId(blob)
    members = group.members
    rot = next(i for i, ep in enumerate(members) if ep.rank == root)
    ring = members[rot:] + members[:rot]
    rt.bootstrap_count += 1
    return Communicator(rt, group, uid, ring)


class _ChunkChannel:
    """Credit-gated double-buffered chunk transport along ring edges."""

    def __init__(self, comm: Communicator, coll_seq: int):
        self.comm = comm
        self.rt = comm.rt
        self.chunk = comm.rt.collective_chunk
        self.coll_seq = coll_seq
        self._tx: dict[int, int] = {}
        self._rx: dict[int, int] = {}

    def _token(self, src_pos: int, seq: int, ack: bool) -> bytes:
        raw = b"%s:%d:%d:%d:%d" % (self.comm.uid.value, self.coll_seq,
                                   src_pos, seq, int(ack))
        return hashlib.sha256(raw).digest()[:8]

    def _wait_local(self, ep: Endpoint, offset: int, token: bytes):
        gm = self.rt.gm
        self.rt.engine.wait_until(
            lambda: bytes(gm.view(ep.device, offset, 8)) == token,
            self.rt.cfg.timeout,
            f"collective token at device {ep.device} offset {offset}")

    def send(self, src_pos: int, src: GlobalAddress, nbytes: int):
        rt = self.rt
        ring = self.comm.ring
        src_ep = ring[src_pos]
        dst_ep = ring[(src_pos + 1) % len(ring)]
        seq = self._tx.get(src_pos, 0)
        self._tx[src_pos] = seq + 1
        slot = seq % 2
        scratch = rt.scratch_offset
        if seq >= 2:
            self._wait_local(src_ep, scratch + _ack_off(self.chunk) + slot * 8,
                             self._token(src_pos, seq - 2, ack=True))
        dst_slot = GlobalAddress(dst_ep.rank, dst_ep.device,
                                 scratch + slot * self.chunk)
        rt.put(dst_slot, src, nbytes, TransferKind.D2D).wait(rt.cfg.timeout)
        flag = GlobalAddress(dst_ep.rank, dst_ep.device,
                             scratch + _flag_off(self.chunk) + slot * 8)
        rt.put(flag, self._token(src_pos, seq, ack=False), 8,
               TransferKind.H2D).wait(rt.cfg.timeout)

    def recv(self, dst_pos: int) -> tuple[int, int]:
        """Wait for the next chunk at my position; returns (slot, seq)."""
        ring = self.comm.ring
        my_ep = ring[dst_pos]
        src_pos = (dst_pos - 1) % len(ring)
        seq = self._rx.get(dst_pos, 0)
        self._rx[dst_pos] = seq + 1
        slot = seq % 2
        self._wait_local(my_ep,
                         self.rt.scratch_offset + _flag_off(self.chunk) + slot * 8,
                         self._token(src_pos, seq, ack=False))
        return slot, seq

    def ack(self, dst_pos: int, seq: int, slot: int):
        """Return the slot credit to the predecessor."""
        rt = self.rt
        ring = self.comm.ring
        src_pos = (dst_pos - 1) % len(ring)
        src_ep = ring[src_pos]
        ack_addr = GlobalAddress(src_ep.rank, src_ep.device,
                                 rt.scratch_offset + _ack_off(self.chunk) + slot * 8)
        rt.put(ack_addr, self._token(src_pos, seq, ack=True), 8,
               TransferKind.H2D).wait(rt.cfg.timeout)

    def slot_array(self, ep: Endpoint, slot: int, nbytes: int) -> np.ndarray:
        base = self.rt.scratch_offset + slot * self.chunk
        return self.rt.gm.arena(ep.device)[base:base + nbytes]


def _chunks(nbytes: int, chunk: int) -> list[tuple[int, int]]:
    out = []
    pos = 0
    while pos < nbytes:
        take = min(chunk, nbytes - pos)
        out.append((pos, take))
        pos += take
    return out


def _member_addr(ep: Endpoint, buffer: GlobalAddress, delta: int = 0) -> GlobalAddress:
    return GlobalAddress(ep.rank, ep.device, buffer.offset + delta)


def bcast(comm: Communicator, buffer: GlobalAddress, nbytes: int, root: int = 0):
    """Ring-pipeline broadcast; every member's buffer ends equal to the
    root member's buffer at entry."""
    rt = comm.rt
    k = comm.size
    if not 0 <= root < k:
        raise RootOutOfRange(f"root index {root} outside communicator of size {k}")
    for ep in comm.ring:
        if ep.rank == rt.rank:
            rt.gm.check_rma_range(ep.device, buffer.offset, max(nbytes, 1))
    if k == 1 or nbytes == 0:
        return
    ch = _ChunkChannel(comm, comm._next_seq())
    order = [(root + i) % k for i in range(k)]
    for start, size in _chunks(nbytes, ch.chunk):
        for idx, pos in enumerate(order):
            ep = comm.ring[pos]
            if ep.rank != rt.rank:
                continue
            if idx > 0:
                slot, seq = ch.recv(pos)
                dst = rt.gm.arena(ep.device)
                dst[buffer.offset + start:buffer.offset + start + size] = \
                    ch.slot_array(ep, slot, size)
                ch.ack(pos, seq, slot)
            if idx < k - 1:
                ch.send(pos, _member_addr(ep, buffer, start), size)


def _typed(arr: np.ndarray, etype: ElementType) -> np.ndarray:
    return arr.view(etype.dtype)


def _check_typed(buffer: GlobalAddress, count: int, etype: ElementType):
    if buffer.offset % etype.dtype.itemsize:
        raise TypeMismatch(f"offset {buffer.offset} misaligned for {etype.value}")


def reduce(comm: Communicator, send: GlobalAddress, recv: GlobalAddress,
           count: int, op: ReduceOp, root: int = 0):
    """Traveling-accumulator ring reduction to the root member; non-root
    recv buffers are untouched."""
    rt = comm.rt
    k = comm.size
    if not 0 <= root < k:
        raise RootOutOfRange(f"root index {root} outside communicator of size {k}")
    _check_typed(send, count, op.etype)
    _check_typed(recv, count, op.etype)
    isz = op.etype.dtype.itemsize
    nbytes = count * isz
    for ep in comm.ring:
        if ep.rank == rt.rank:
            rt.gm.check_rma_range(ep.device, send.offset, max(nbytes, 1))
    if count == 0:
        return
    root_ep = comm.ring[root]
    if k == 1:
        arena = rt.gm.arena(root_ep.device)
        if send.offset != recv.offset:
            rt.gm.check_rma_range(root_ep.device, recv.offset, nbytes)
            arena[recv.offset:recv.offset + nbytes] = \
                arena[send.offset:send.offset + nbytes]
        return
    ch = _ChunkChannel(comm, comm._next_seq())
    order = [(root + i) % k for i in range(k)]
    for start, size in _chunks(nbytes, ch.chunk):
        # Root launches its own contribution; every position folds its
        # chunk on top and forwards; the finished chunk returns to root.
        for idx, pos in enumerate(order):
            ep = comm.ring[pos]
            if ep.rank != rt.rank:
                continue
            if idx == 0:
                ch.send(pos, _member_addr(ep, send, start), size)
            else:
                slot, seq = ch.recv(pos)
                acc = _typed(ch.slot_array(ep, slot, size), op.etype)
                mine = _typed(rt.gm.arena(ep.device)[send.offset + start:
                                                     send.offset + start + size],
                              op.etype)
                op.ufunc(acc, mine, out=acc)
                ch.send(pos, GlobalAddress(ep.rank, ep.device,
                                           rt.scratch_offset
                                           + slot * ch.chunk), size)
                ch.ack(pos, seq, slot)
        if root_ep.rank == rt.rank:
            rt.gm.check_rma_range(root_ep.device, recv.offset, nbytes)
            slot, seq = ch.recv(root)
            arena = rt.gm.arena(root_ep.device)
            arena[recv.offset + start:recv.offset + start + size] = \
                ch.slot_array(root_ep, slot, size)
            ch.ack(root, seq, slot)


def allreduce(comm: Communicator, send: GlobalAddress, recv: GlobalAddress,
              count: int, op: ReduceOp):
    """Ring reduce-scatter + ring allgather; in-place (send == recv) works."""
    rt = comm.rt
    k = comm.size
    _check_typed(send, count, op.etype)
    _check_typed(recv, count, op.etype)
    isz = op.etype.dtype.itemsize
    nbytes = count * isz
    for ep in comm.ring:
        if ep.rank == rt.rank:
            rt.gm.check_rma_range(ep.device, send.offset, max(nbytes, 1))
            rt.gm.check_rma_range(ep.device, recv.offset, max(nbytes, 1))
    if count == 0:
        return
    for ep in comm.ring:
        if ep.rank == rt.rank and send.offset != recv.offset:
            arena = rt.gm.arena(ep.device)
            arena[recv.offset:recv.offset + nbytes] = \
                arena[send.offset:send.offset + nbytes]
    if k == 1:
        return

    bounds = [(b * count // k * isz, (b + 1) * count // k * isz)
              for b in range(k)]

    ch = _ChunkChannel(comm, comm._next_seq())

    def block_chunks(b):
        lo, hi = bounds[b]
        return [(lo + s, sz) for s, sz in _chunks(hi - lo, ch.chunk)]
    max_chunks = max(len(block_chunks(b)) for b in range(k))

    # Phase 1: reduce-scatter. At step s, position i forwards block (i-s)%k
    # and folds its own contribution into arriving block (i-s-1)%k.
    for s in range(k - 1):
        for j in range(max_chunks):
            for pos in comm.my_positions:
                b = (pos - s) % k
                cl = block_chunks(b)
                if j < len(cl):
                    start, size = cl[j]
                    ep = comm.ring[pos]
                    ch.send(pos, _member_addr(ep, recv, start), size)
            for pos in comm.my_positions:
                b = (pos - s - 1) % k
                cl = block_chunks(b)
                if j < len(cl):
                    start, size = cl[j]
                    ep = comm.ring[pos]
                    slot, seq = ch.recv(pos)
                    incoming = _typed(ch.slot_array(ep, slot, size), op.etype)
                    mine = _typed(rt.gm.arena(ep.device)[recv.offset + start:
                                                         recv.offset + start + size],
                                  op.etype)
                    op.ufunc(incoming, mine, out=mine)
                    ch.ack(pos, seq, slot)

    # Phase 2: allgather. Position i starts owning final block (i+1)%k and
    # forwards the block it most recently received.
    for s in range(k - 1):
        for j in range(max_chunks):
            for pos in comm.my_positions:
                b = (pos + 1 - s) % k
                cl = block_chunks(b)
                if j < len(cl):
                    start, size = cl[j]
                    ep = comm.ring[pos]
                    ch.send(pos, _member_addr(ep, recv, start), size)
            for pos in comm.my_positions:
                b = (pos - s) % k
                cl = block_chunks(b)
                if j < len(cl):
                    start, size = cl[j]
                    ep = comm.ring[pos]
                    slot, seq = ch.recv(pos)
                    arena = rt.gm.arena(ep.device)
                    arena[recv.offset + start:recv.offset + start + size] = \
                        ch.slot_array(ep, slot, size)
                    ch.ack(pos, seq, slot)


def device_bcast(rt: Runtime, var: GlobalAddress, nbytes: int, group: Group):
    """Broadcast from the group's first endpoint, reusing one cached
    communicator per group."""
    group = rt._check_group(group)
    comm = rt.comm_cache.get(group.id)
    if comm is None:
        comm = bootstrap(rt, group)
        rt.comm_cache[group.id] = comm
    bcast(comm, var, nbytes, root=0)
