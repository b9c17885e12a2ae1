"""Arena allocators for the per-device global segments.

Two symmetric-region strategies are provided: a bump ("linear heap")
allocator with an exact-size free list, and a buddy allocator with a
256-byte minimum block. Both are deterministic pure state machines: feeding
the same call sequence on every rank yields the same offsets, which is what
makes offset-based remote addressing work. A third allocator grows downward
from the top of the segment and backs asymmetric payloads.

DIOMP_FAULT_INJECT=alloc_overlap deliberately corrupts the second symmetric
allocation (returns the previous offset again); it exists so the selftest's
mutation check can show the non-overlap property actually fails.
"""

from __future__ import annotations

import os

from .errors import DoubleFree, OutOfSegment

MIN_BUDDY_BLOCK = 256


def is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def align_up(value: int, align: int) -> int:
    return (value + align - 1) & ~(align - 1)


def ceil_log2(n: int) -> int:
    return (n - 1).bit_length() if n > 1 else 0


class LinearAllocator:
    """Bump allocator over [0, capacity) with exact-size block reuse."""

    kind = "linear"

    def __init__(self, capacity: int, alignment: int = 64):
        self.capacity = capacity
        self.alignment = alignment
        self._top = 0
        self._free: dict[int, list[int]] = {}    # rounded size -> LIFO offsets
        self.live: dict[int, int] = {}           # offset -> rounded size

    def block_size(self, size: int) -> int:
        return align_up(max(size, 1), self.alignment)

    def alloc(self, size: int) -> int:
        rounded = self.block_size(size)
        bucket = self._free.get(rounded)
        if bucket:
            off = bucket.pop()
        else:
            off = self._top
            if off + rounded > self.capacity:
                raise OutOfSegment(
                    f"linear: {rounded} bytes do not fit (top={self._top}, "
                    f"capacity={self.capacity})")
            self._top = off + rounded
        off = _maybe_inject_overlap(self, off)
        self.live[off] = rounded
        return off

    def free(self, offset: int) -> int:
        if offset not in self.live:
            raise DoubleFree(f"linear: offset {offset} is not live")
        rounded = self.live.pop(offset)
        self._free.setdefault(rounded, []).append(offset)
        return rounded


class BuddyAllocator:
    """Power-of-two buddy allocator.

    Covers [0, capacity) minus an optional reserved tail [reserve_from,
    capacity) which is never handed out and never merged over. Blocks round
    up to 2^ceil(log2(max(size, 256))). Free block choice is lowest-address,
    so identical call sequences are reproducible.
    """

    kind = "buddy"

    def __init__(self, capacity: int, reserve_from: int | None = None):
        if not is_pow2(capacity):
            raise ValueError("buddy capacity must be a power of two")
        self.capacity = capacity
        self.min_order = ceil_log2(MIN_BUDDY_BLOCK)
        self.max_order = ceil_log2(capacity)
        self._free: dict[int, set[int]] = {o: set() for o in
                                           range(self.min_order, self.max_order + 1)}
        self.live: dict[int, int] = {}           # offset -> block size
        self._live_order: dict[int, int] = {}    # offset -> order
        if reserve_from is None:
            self._free[self.max_order].add(0)
        else:
            # Seed the free lists with the buddy decomposition of
            # [0, reserve_from); the tail block stays out of circulation.
            off = 0
            rest = reserve_from
            order = self.max_order
            while rest > 0:
                blk = 1 << order
                if blk <= rest and off % blk == 0:
                    self._free[order].add(off)
                    off += blk
                    rest -= blk
                else:
                    order -= 1
                    if order < self.min_order:
                        raise ValueError("reserve_from not representable")

    def block_size(self, size: int) -> int:
        return 1 << max(ceil_log2(max(size, 1)), self.min_order)

    def alloc(self, size: int) -> int:
        if size > self.capacity:
            raise OutOfSegment(f"buddy: {size} bytes exceed capacity")
        order = max(ceil_log2(max(size, 1)), self.min_order)
        source = order
        while source <= self.max_order and not self._free[source]:
            source += 1
        if source > self.max_order:
            raise OutOfSegment(f"buddy: no free block for {size} bytes")
        off = min(self._free[source])
        self._free[source].discard(off)
        while source > order:
            source -= 1
            self._free[source].add(off + (1 << source))
        off = _maybe_inject_overlap(self, off)
        self.live[off] = 1 << order
        self._live_order[off] = order
        return off

    def free(self, offset: int) -> int:
        if offset not in self.live:
            raise DoubleFree(f"buddy: offset {offset} is not live")
        size = self.live.pop(offset)
        order = self._live_order.pop(offset)
        while order < self.max_order:
            buddy = offset ^ (1 << order)
            if buddy not in self._free[order]:
                break
            self._free[order].discard(buddy)
            offset = min(offset, buddy)
            order += 1
        self._free[order].add(offset)
        return size


class ReverseBumpAllocator:
    """Downward bump allocator over [floor, capacity) with exact-size reuse.

    Backs the asymmetric payload region at the top of each segment.
    """

    def __init__(self, floor: int, capacity: int, alignment: int = 64):
        self.floor = floor
        self.capacity = capacity
        self.alignment = alignment
        self._bottom = capacity
        self._free: dict[int, list[int]] = {}
        self.live: dict[int, int] = {}

    def block_size(self, size: int) -> int:
        return align_up(max(size, 1), self.alignment)

    def alloc(self, size: int) -> int:
        rounded = self.block_size(size)
        bucket = self._free.get(rounded)
        if bucket:
            off = bucket.pop()
        else:
            off = (self._bottom - rounded) & ~(self.alignment - 1)
            if off < self.floor:
                raise OutOfSegment(
                    f"asymmetric region: {rounded} bytes do not fit "
                    f"(bottom={self._bottom}, floor={self.floor})")
            self._bottom = off
        self.live[off] = rounded
        return off

    def free(self, offset: int) -> int:
        if offset not in self.live:
            raise DoubleFree(f"asymmetric region: offset {offset} is not live")
        rounded = self.live.pop(offset)
        self._free.setdefault(rounded, []).append(offset)
        return rounded


def _maybe_inject_overlap(alloc, off: int) -> int:
    # Test seam: return the previously allocated offset to create an overlap.
    if os.environ.get("DIOMP_FAULT_INJECT") == "alloc_overlap" and alloc.live:
        return next(reversed(alloc.live))
    return off
