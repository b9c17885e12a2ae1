"""Per-device global segments and the collective allocation state machine.

Each device owns one registered arena ("segment"). The lower 75% of a
segment is the symmetric region: collective allocations of identical size
land at identical offsets on every rank, so a remote address is just
(target rank, device, same offset). The top 25% holds asymmetric payloads,
which may differ per rank; they are reachable through indirection cells --
fixed 32-byte descriptors that ARE symmetric and record where this rank's
payload actually lives.

Cell layout (32 bytes, little-endian): payload offset u64, payload size
u64, generation u64, reserved u64 (zero). The generation counts binds and
frees of the cell slot, which is what lets a peer detect that its cached
resolution went stale.

Everything in this module is a deterministic local state machine; the
collective digest exchange that guards it lives in the runtime. Tests replay
call sequences against a fresh instance as the reference oracle.
"""

from __future__ import annotations

import enum
import struct
from bisect import bisect_right, insort
from dataclasses import dataclass, field

import numpy as np

from .allocators import (BuddyAllocator, LinearAllocator, ReverseBumpAllocator,
                         is_pow2)
from .errors import (AllocationFailure, DoubleFree, InvalidAddress, NotSymmetric,
                     NullPayload, StaleCell)

CELL_BYTES = 32
_CELL_STRUCT = struct.Struct("<QQQQ")

MIB = 1024 * 1024
DEFAULT_SEGMENT_BYTES = 64 * MIB


class AllocatorKind(enum.Enum):
    Linear = "linear"
    Buddy = "buddy"


class AllocMode(enum.Enum):
    Symmetric = "symmetric"
    Asymmetric = "asymmetric"


class TransferKind(enum.Enum):
    """cudaMemcpy-style transfer classification: <src>2<dst>.

    The remote side of put/get is always a device segment, so puts accept
    H2D/D2D and gets accept D2H/D2D; the others raise KindMismatch.
    """

    H2H = "h2h"
    H2D = "h2d"
    D2H = "d2h"
    D2D = "d2d"

    @property
    def src_is_device(self) -> bool:
        return self in (TransferKind.D2H, TransferKind.D2D)

    @property
    def dst_is_device(self) -> bool:
        return self in (TransferKind.H2D, TransferKind.D2D)


@dataclass(frozen=True, order=True)
class GlobalAddress:
    """Location of a byte range start in some rank's device segment."""

    rank: int
    device: int
    offset: int

    def __post_init__(self):
        if self.rank < 0 or self.device < 0 or self.offset < 0:
            raise ValueError(f"negative field in {self!r}")


@dataclass(frozen=True)
class SegmentConfig:
    segment_bytes: int = DEFAULT_SEGMENT_BYTES
    allocator_kind: AllocatorKind = AllocatorKind.Buddy
    alignment: int = 64

    def __post_init__(self):
        if self.segment_bytes < MIB or not is_pow2(self.segment_bytes):
            raise ValueError("segment_bytes must be a power of two >= 1 MiB")
        if not is_pow2(self.alignment) or self.alignment > 4096:
            raise ValueError("alignment must be a power of two <= 4096")

    def digest(self) -> bytes:
        return f"{self.segment_bytes}:{self.allocator_kind.value}:{self.alignment}".encode()


@dataclass
class AllocRecord:
    addr: GlobalAddress
    size: int                      # rounded block size actually reserved
    mode: AllocMode
    stream_id: int | None = None
    requested: int = 0             # size the caller asked for
    live: bool = True


@dataclass
class IndirectionCell:
    """Handle to a symmetric 32-byte cell describing an asymmetric payload."""

    cell_addr: GlobalAddress
    generation: int
    local_payload: GlobalAddress | None
    local_size: int
    live: bool = True


@dataclass
class Segment:
    device: int
    config: SegmentConfig
    buf: np.ndarray = field(repr=False)

    @property
    def nbytes(self) -> int:
        return self.config.segment_bytes

    def view(self, offset: int, nbytes: int) -> memoryview:
        return memoryview(self.buf)[offset:offset + nbytes]


def pack_cell(payload_offset: int, payload_size: int, generation: int) -> bytes:
    return _CELL_STRUCT.pack(payload_offset, payload_size, generation, 0)


def unpack_cell(raw: bytes | memoryview) -> tuple[int, int, int]:
    off, size, gen, _reserved = _CELL_STRUCT.unpack(bytes(raw[:CELL_BYTES]))
    return off, size, gen


class _DeviceHeap:
    """Allocator pair plus the live-range index for one device."""

    def __init__(self, config: SegmentConfig, device: int):
        self.config = config
        self.device = device
        nbytes = config.segment_bytes
        self.asym_base = nbytes - nbytes // 4
        if config.allocator_kind is AllocatorKind.Buddy:
            self.sym = BuddyAllocator(nbytes, reserve_from=self.asym_base)
        else:
            self.sym = LinearAllocator(self.asym_base, config.alignment)
        self.asym = ReverseBumpAllocator(self.asym_base, nbytes, config.alignment)
        self.records: dict[int, AllocRecord] = {}
        self._starts: list[int] = []

    def add_record(self, rec: AllocRecord):
        self.records[rec.addr.offset] = rec
        insort(self._starts, rec.addr.offset)

    def drop_record(self, offset: int):
        del self.records[offset]
        i = bisect_right(self._starts, offset) - 1
        if i >= 0 and self._starts[i] == offset:
            self._starts.pop(i)

    def containing(self, offset: int, nbytes: int) -> AllocRecord | None:
        i = bisect_right(self._starts, offset) - 1
        if i < 0:
            return None
        rec = self.records[self._starts[i]]
        if offset + nbytes <= rec.addr.offset + rec.size:
            return rec
        return None


class GlobalMemory:
    """One rank's view of the global memory state.

    The local_* methods are the deterministic transitions run on every rank
    under the collective contract; the runtime performs the digest exchange
    before invoking them.
    """

    def __init__(self, config: SegmentConfig, device_count: int, rank: int = 0):
        if device_count < 1:
            raise ValueError("device_count must be >= 1")
        self.config = config
        self.rank = rank
        self.device_count = device_count
        try:
            self.segments = [Segment(d, config, np.zeros(config.segment_bytes,
                                                         dtype=np.uint8))
                             for d in range(device_count)]
        except MemoryError as e:
            raise AllocationFailure(f"cannot reserve {device_count} arenas of "
                                    f"{config.segment_bytes} bytes") from e
        self._heaps = [_DeviceHeap(config, d) for d in range(device_count)]
        self._cell_generation: dict[tuple[int, int], int] = {}
        # (device, cell_offset, target_rank) -> (payload GlobalAddress, size, generation)
        self.cell_cache: dict[tuple[int, int, int], tuple[GlobalAddress, int, int]] = {}

    # -- arena access ---------------------------------------------------

    def arena(self, device: int) -> np.ndarray:
        return self.segments[device].buf

    def view(self, device: int, offset: int, nbytes: int) -> memoryview:
        return self.segments[device].view(offset, nbytes)

    def asym_base(self, device: int) -> int:
        return self._heaps[device].asym_base

    # -- allocation transitions ------------------------------------------

    def local_alloc_symmetric(self, size: int, device: int,
                              stream_id: int | None = None) -> AllocRecord:
        if size <= 0:
            raise ValueError("symmetric allocation size must be > 0")
        heap = self._heaps[device]
        off = heap.sym.alloc(size)
        rec = AllocRecord(GlobalAddress(self.rank, device, off),
                          heap.sym.block_size(size), AllocMode.Symmetric,
                          stream_id=stream_id, requested=size)
        heap.add_record(rec)
        return rec

    def local_alloc_asymmetric(self, local_size: int, device: int) -> IndirectionCell:
        heap = self._heaps[device]
        cell_off = heap.sym.alloc(CELL_BYTES)
        cell_rec = AllocRecord(GlobalAddress(self.rank, device, cell_off),
                               heap.sym.block_size(CELL_BYTES), AllocMode.Symmetric,
                               requested=CELL_BYTES)
        heap.add_record(cell_rec)

        payload_addr = None
        payload_off = 0
        if local_size > 0:
            try:
                payload_off = heap.asym.alloc(local_size)
            except Exception:
                heap.drop_record(cell_off)
                heap.sym.free(cell_off)
                raise
            payload_addr = GlobalAddress(self.rank, device, payload_off)
            heap.add_record(AllocRecord(payload_addr, heap.asym.block_size(local_size),
                                        AllocMode.Asymmetric, requested=local_size))

        key = (device, cell_off)
        gen = self._cell_generation.get(key, 0) + 1
        self._cell_generation[key] = gen
        self.view(device, cell_off, CELL_BYTES)[:] = pack_cell(payload_off, local_size, gen)
        return IndirectionCell(cell_rec.addr, gen, payload_addr, local_size)

    def local_free(self, record: AllocRecord):
        heap = self._heaps[record.addr.device]
        if not record.live or record.addr.offset not in heap.records:
            raise DoubleFree(f"record at {record.addr} is not live")
        if record.mode is AllocMode.Asymmetric:
            heap.asym.free(record.addr.offset)
        else:
            heap.sym.free(record.addr.offset)
        heap.drop_record(record.addr.offset)
        record.live = False

    def local_free_cell(self, cell: IndirectionCell):
        if not cell.live:
            raise DoubleFree(f"cell at {cell.cell_addr} is not live")
        device = cell.cell_addr.device
        heap = self._heaps[device]
        cell_off = cell.cell_addr.offset
        key = (device, cell_off)
        # Bump the generation in the cell bytes before releasing anything so
        # an in-flight remote fetch can only observe a mismatch, never a
        # plausible-but-dead binding.
        gen = self._cell_generation[key] + 1
        self._cell_generation[key] = gen
        self.view(device, cell_off, CELL_BYTES)[:] = pack_cell(0, 0, gen)
        if cell.local_payload is not None:
            heap.asym.free(cell.local_payload.offset)
            heap.drop_record(cell.local_payload.offset)
        heap.drop_record(cell_off)
        heap.sym.free(cell_off)
        cell.live = False
        for k in [k for k in self.cell_cache if k[0] == device and k[1] == cell_off]:
            del self.cell_cache[k]

    # -- addressing -------------------------------------------------------

    def translate(self, local: GlobalAddress, target_rank: int) -> GlobalAddress:
        """Rebase a symmetric local address onto another rank. Pure."""
        heap = self._heaps[local.device]
        rec = heap.containing(local.offset, 1)
        if rec is None or rec.mode is not AllocMode.Symmetric:
            raise NotSymmetric(f"{local} is not inside a live symmetric allocation")
        return GlobalAddress(target_rank, local.device, local.offset)

    def record_at(self, device: int, offset: int, nbytes: int) -> AllocRecord | None:
        return self._heaps[device].containing(offset, nbytes)

    def check_rma_range(self, device: int, offset: int, nbytes: int) -> AllocRecord:
        """Authoritative live-range check on the owning rank."""
        if device >= self.device_count or offset + nbytes > self.config.segment_bytes:
            raise InvalidAddress(f"(device={device}, offset={offset}, nbytes={nbytes}) "
                                 f"outside the segment")
        rec = self._heaps[device].containing(offset, nbytes)
        if rec is None:
            raise InvalidAddress(f"(device={device}, offset={offset}, nbytes={nbytes}) "
                                 f"is not inside a live allocation")
        return rec

    def mirror_check(self, device: int, offset: int, nbytes: int) -> AllocRecord | None:
        """Initiator-side fast-fail for symmetric-region targets.

        Symmetric ledgers are identical on every rank, so the local ledger
        is authoritative for remote symmetric addresses. Asymmetric-region
        offsets cannot be checked here; the owner validates those.
        """
        if offset + nbytes > self.config.segment_bytes:
            raise InvalidAddress(f"(device={device}, offset={offset}, nbytes={nbytes}) "
                                 f"outside the segment")
        if offset < self._heaps[device].asym_base:
            rec = self._heaps[device].containing(offset, nbytes)
            if rec is None:
                raise InvalidAddress(f"symmetric range (device={device}, offset={offset}, "
                                     f"nbytes={nbytes}) is not live")
            return rec
        return None

    # -- indirection cells ------------------------------------------------

    def cell_generation(self, cell: IndirectionCell) -> int:
        return self._cell_generation.get(
            (cell.cell_addr.device, cell.cell_addr.offset), 0)

    def read_local_cell(self, cell: IndirectionCell) -> tuple[int, int, int]:
        return unpack_cell(self.view(cell.cell_addr.device,
                                     cell.cell_addr.offset, CELL_BYTES))

    def cache_lookup(self, cell: IndirectionCell, target_rank: int):
        key = (cell.cell_addr.device, cell.cell_addr.offset, target_rank)
        hit = self.cell_cache.get(key)
        if hit is None or hit[2] != cell.generation:
            return None
        return hit

    def cache_store(self, cell: IndirectionCell, target_rank: int,
                    addr: GlobalAddress, size: int):
        key = (cell.cell_addr.device, cell.cell_addr.offset, target_rank)
        self.cell_cache[key] = (addr, size, cell.generation)

    def resolve_from_bytes(self, cell: IndirectionCell, target_rank: int,
                           raw: bytes | memoryview) -> GlobalAddress:
        """Interpret fetched cell bytes; caches and returns the payload address."""
        off, size, gen = unpack_cell(raw)
        if gen != cell.generation:
            raise StaleCell(f"cell at {cell.cell_addr}: expected generation "
                            f"{cell.generation}, found {gen}")
        addr = GlobalAddress(target_rank, cell.cell_addr.device, off)
        self.cache_store(cell, target_rank, addr, size)
        if size == 0:
            raise NullPayload(f"cell at {cell.cell_addr} binds a zero-byte payload "
                              f"on rank {target_rank}")
        return addr

    # -- introspection ------------------------------------------------------

    def symmetric_ledger(self, device: int) -> tuple[tuple[int, int], ...]:
        heap = self._heaps[device]
        return tuple(sorted((off, rec.size) for off, rec in heap.records.items()
                            if rec.mode is AllocMode.Symmetric))

    def full_ledger(self, device: int) -> tuple[tuple[int, int, str], ...]:
        heap = self._heaps[device]
        return tuple(sorted((off, rec.size, rec.mode.value)
                            for off, rec in heap.records.items()))

    def live_ranges_overlap(self, device: int) -> bool:
        ledger = self.full_ledger(device)
        for (o1, s1, _), (o2, _, _) in zip(ledger, ledger[1:]):
            if o1 + s1 > o2:
                return True
        return False


def segment_create(config: SegmentConfig, device_count: int) -> list[Segment]:
    """Reserve zero-initialized arenas; one per device."""
    return GlobalMemory(config, device_count).segments
