import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diomp.allocators import (BuddyAllocator, LinearAllocator,
                              ReverseBumpAllocator)
from diomp.errors import DoubleFree, OutOfSegment

MIB = 1024 * 1024


def test_linear_first_two_allocations_stack():
    # 16 KiB then 32 KiB from a fresh linear heap: offsets 0 and 16384
    lin = LinearAllocator(MIB)
    assert lin.alloc(16 * 1024) == 0
    assert lin.alloc(32 * 1024) == 16 * 1024


def test_linear_alignment_rounding():
    lin = LinearAllocator(MIB, alignment=64)
    assert lin.alloc(1) == 0
    assert lin.alloc(1) == 64


def test_linear_exact_size_reuse():
    lin = LinearAllocator(MIB)
    a = lin.alloc(4096)
    lin.free(a)
    assert lin.alloc(4096) == a
    # different size: fresh space, not the freed hole
    assert lin.alloc(8192) != a


def test_linear_out_of_segment():
    lin = LinearAllocator(4096)
    lin.alloc(4096)
    with pytest.raises(OutOfSegment):
        lin.alloc(1)


def test_buddy_rounding_powers_of_two():
    buddy = BuddyAllocator(MIB)
    assert buddy.block_size(1) == 256          # minimum block
    assert buddy.block_size(256) == 256
    assert buddy.block_size(257) == 512
    assert buddy.block_size(8 * 1024) == 8 * 1024
    assert buddy.block_size(8 * 1024 + 1) == 16 * 1024


def test_buddy_free_then_realloc_same_offset():
    buddy = BuddyAllocator(MIB)
    off = buddy.alloc(8 * 1024)
    buddy.free(off)
    assert buddy.alloc(8 * 1024) == off


def test_buddy_sibling_coalescing():
    buddy = BuddyAllocator(MIB)
    a = buddy.alloc(4 * 1024)
    b = buddy.alloc(4 * 1024)
    assert {a, b} == {0, 4 * 1024}   # siblings under one 8 KiB parent
    blocker = buddy.alloc(512 * 1024)
    buddy.free(a)
    buddy.free(b)
    assert buddy.alloc(8 * 1024) == 0   # parent reconstituted at offset 0
    buddy.free(blocker)


def test_buddy_exhaustion_and_double_free():
    buddy = BuddyAllocator(4096)
    offs = [buddy.alloc(256) for _ in range(16)]
    with pytest.raises(OutOfSegment):
        buddy.alloc(256)
    buddy.free(offs[0])
    with pytest.raises(DoubleFree):
        buddy.free(offs[0])


def test_buddy_reserved_tail_not_allocatable():
    cap = MIB
    buddy = BuddyAllocator(cap, reserve_from=cap - cap // 4)
    # the largest satisfiable block is half the arena
    assert buddy.alloc(cap // 2) == 0
    assert buddy.alloc(cap // 4) == cap // 2
    with pytest.raises(OutOfSegment):
        buddy.alloc(cap // 4)   # only the reserved tail remains


def test_reverse_allocator_grows_downward():
    rev = ReverseBumpAllocator(0, MIB)
    a = rev.alloc(4096)
    b = rev.alloc(4096)
    assert a == MIB - 4096
    assert b == a - 4096
    rev.free(a)
    assert rev.alloc(4096) == a


def test_reverse_allocator_floor():
    rev = ReverseBumpAllocator(MIB - 8192, MIB)
    rev.alloc(8192)
    with pytest.raises(OutOfSegment):
        rev.alloc(64)


@st.composite
def _op_sequences(draw):
    ops = []
    live = 0
    for _ in range(draw(st.integers(1, 120))):
        if live and draw(st.booleans()):
            ops.append(("free", draw(st.integers(0, live - 1))))
            live -= 1
        else:
            ops.append(("alloc", draw(st.integers(1, 50_000))))
            live += 1
    return ops


@settings(max_examples=60, deadline=None)
@given(_op_sequences(), st.sampled_from(["buddy", "linear"]))
def test_fuzz_live_ranges_never_overlap(ops, kind):
    alloc = BuddyAllocator(4 * MIB) if kind == "buddy" else LinearAllocator(4 * MIB)
    live = []
    for op in ops:
        if op[0] == "alloc":
            try:
                off = alloc.alloc(op[1])
            except OutOfSegment:
                continue
            live.append(off)
        elif live:
            alloc.free(live.pop(op[1] % len(live)))
    ranges = sorted((off, alloc.live[off]) for off in live)
    for (o1, s1), (o2, _) in zip(ranges, ranges[1:]):
        assert o1 + s1 <= o2, f"{kind}: overlap at {o1}+{s1} > {o2}"
    for off, size in ranges:
        assert off + size <= alloc.capacity


@settings(max_examples=30, deadline=None)
@given(_op_sequences(), st.sampled_from(["buddy", "linear"]))
def test_fuzz_determinism_across_replays(ops, kind):
    def run():
        alloc = BuddyAllocator(4 * MIB) if kind == "buddy" \
            else LinearAllocator(4 * MIB)
        live, trace = [], []
        for op in ops:
            if op[0] == "alloc":
                try:
                    off = alloc.alloc(op[1])
                except OutOfSegment:
                    trace.append(("oom",))
                    continue
                live.append(off)
                trace.append(("a", off))
            elif live:
                off = live.pop(op[1] % len(live))
                alloc.free(off)
                trace.append(("f", off))
        return trace

    assert run() == run()
