import numpy as np
import pytest

from diomp import collectives as coll
from diomp.emulate import run_emulated
from diomp.errors import RootOutOfRange, TypeMismatch
from diomp.global_memory import GlobalAddress

MIB = 1024 * 1024
SUM_F64 = coll.ReduceOp(coll.ReduceKind.Sum, coll.ElementType.f64)
SUM_I64 = coll.ReduceOp(coll.ReduceKind.Sum, coll.ElementType.i64)
MAX_I32 = coll.ReduceOp(coll.ReduceKind.Max, coll.ElementType.i32)


def _write(rt, rec, array, device=0):
    off = rec.addr.offset
    rt.gm.arena(device)[off:off + array.nbytes] = array.view(np.uint8)


def _typed_read(rt, rec, dtype, count, device=0):
    off = rec.addr.offset
    n = count * np.dtype(dtype).itemsize
    return np.frombuffer(bytes(rt.gm.view(device, off, n)), dtype=dtype)


def reduce_fold_oracle(contribs, ufunc):
    """Serial left fold in ring order from the root (position order)."""
    acc = contribs[0].copy()
    for v in contribs[1:]:
        acc = ufunc(acc, v)
    return acc


def allreduce_oracle(contribs, ufunc):
    """Serial emulation of the documented reduce-scatter block folds."""
    k = len(contribs)
    count = len(contribs[0])
    out = np.empty_like(contribs[0])
    for b in range(k):
        lo, hi = b * count // k, (b + 1) * count // k
        acc = contribs[b][lo:hi].copy()
        for t in range(1, k):
            acc = ufunc(acc, contribs[(b + t) % k][lo:hi])
        out[lo:hi] = acc
    return out


def test_bootstrap_uid_agreement_and_freshness():
    def fn(rt):
        c1 = coll.bootstrap(rt, rt.world)
        c2 = coll.bootstrap(rt, rt.world)
        assert c1.uid != c2.uid
        assert [ep.rank for ep in c1.ring] == sorted(ep.rank for ep in c1.ring)
        return (c1.uid.value, c2.uid.value)

    uids = run_emulated(4, fn, node_ids=[0, 0, 1, 1])
    assert len({u[0] for u in uids}) == 1
    assert len({u[1] for u in uids}) == 1


def test_singleton_communicator():
    def fn(rt):
        comm = coll.bootstrap(rt, rt.world)
        assert comm.size == 1 and comm.ring[0].rank == 0
        rec = rt.alloc_symmetric(4096, 0)
        coll.bcast(comm, rec.addr, 4096, root=0)   # no-op
        send = rt.alloc_symmetric(64, 0)
        recv = rt.alloc_symmetric(64, 0)
        _write(rt, send, np.arange(8, dtype=np.float64))
        coll.reduce(comm, send.addr, recv.addr, 8, SUM_F64, root=0)
        assert np.array_equal(_typed_read(rt, recv, np.float64, 8),
                              np.arange(8, dtype=np.float64))
        return True

    run_emulated(1, fn, segment_bytes=2 * MIB)


def test_bcast_matches_root_snapshot():
    sizes = [1, 100, 128 * 1024, MIB + 7]
    roots = [0, 3, 1, 2]

    def fn(rt):
        comm = coll.bootstrap(rt, rt.world)
        buf = rt.alloc_symmetric(2 * MIB, 0)
        out = []
        for size, root in zip(sizes, roots):
            rng = np.random.default_rng(1000 + size + rt.rank)
            mine = rng.integers(0, 256, size, dtype=np.uint8)
            _write(rt, buf, mine)
            snapshot = mine.tobytes() if rt.rank == root else None
            coll.bcast(comm, buf.addr, size, root=root)
            got = bytes(rt.gm.view(0, buf.addr.offset, size))
            out.append((snapshot, got))
        return out

    results = run_emulated(4, fn, node_ids=[0, 0, 1, 1],
                           segment_bytes=16 * MIB)
    for case in range(len(sizes)):
        root_snapshot = next(r[case][0] for r in results if r[case][0] is not None)
        for r in results:
            assert r[case][1] == root_snapshot


def test_bcast_root_out_of_range():
    def fn(rt):
        comm = coll.bootstrap(rt, rt.world)
        rec = rt.alloc_symmetric(64, 0)
        with pytest.raises(RootOutOfRange):
            coll.bcast(comm, rec.addr, 64, root=comm.size)
        return True

    run_emulated(2, fn, segment_bytes=2 * MIB)


def test_reduce_small_integer_example():
    values = [1, 2, 3, 0]

    def fn(rt):
        comm = coll.bootstrap(rt, rt.world)
        send = rt.alloc_symmetric(64, 0)
        recv = rt.alloc_symmetric(64, 0)
        _write(rt, send, np.array([values[rt.rank]], dtype=np.int64))
        _write(rt, recv, np.array([-99], dtype=np.int64))
        coll.reduce(comm, send.addr, recv.addr, 1, SUM_I64, root=0)
        got = int(_typed_read(rt, recv, np.int64, 1)[0])
        coll.reduce(comm, send.addr, recv.addr, 0, SUM_I64, root=0)  # no-op
        return got

    out = run_emulated(4, fn, segment_bytes=2 * MIB)
    assert out[0] == 6
    assert out[1] == out[2] == out[3] == -99   # non-root recv untouched


def test_reduce_f64_bitwise_matches_ring_fold():
    count = 5000

    def fn(rt):
        comm = coll.bootstrap(rt, rt.world)
        send = rt.alloc_symmetric(count * 8, 0)
        recv = rt.alloc_symmetric(count * 8, 0)
        vec = np.random.default_rng(rt.rank).uniform(-1, 1, count)
        _write(rt, send, vec)
        coll.reduce(comm, send.addr, recv.addr, count, SUM_F64, root=1)
        if rt.rank == 1:
            return _typed_read(rt, recv, np.float64, count).tobytes()
        return None

    out = run_emulated(4, fn, segment_bytes=2 * MIB)
    contribs = [np.random.default_rng(r).uniform(-1, 1, count)
                for r in range(4)]
    # ring order rotated to root=1: fold v1, v2, v3, v0
    rot = [contribs[(1 + i) % 4] for i in range(4)]
    want = reduce_fold_oracle(rot, np.add)
    assert out[1] == want.tobytes()


def test_allreduce_examples_and_oracle():
    def fn(rt):
        comm = coll.bootstrap(rt, rt.world)
        send = rt.alloc_symmetric(8, 0)
        recv = rt.alloc_symmetric(8, 0)
        _write(rt, send, np.array([1.0]))
        coll.allreduce(comm, send.addr, recv.addr, 1, SUM_F64)
        two = float(_typed_read(rt, recv, np.float64, 1)[0])

        vals = [7, -2]
        send2 = rt.alloc_symmetric(8, 0)
        recv2 = rt.alloc_symmetric(8, 0)
        _write(rt, send2, np.array([vals[rt.rank]], dtype=np.int32))
        coll.allreduce(comm, send2.addr, recv2.addr, 1, MAX_I32)
        mx = int(_typed_read(rt, recv2, np.int32, 1)[0])
        return (two, mx)

    out = run_emulated(2, fn, segment_bytes=2 * MIB)
    assert all(o == (2.0, 7) for o in out)


def test_allreduce_f64_bitwise_oracle_four_endpoints():
    count = 9001   # deliberately not divisible by 4

    def fn(rt):
        comm = coll.bootstrap(rt, rt.world)
        send = rt.alloc_symmetric(count * 8, 0)
        recv = rt.alloc_symmetric(count * 8, 0)
        vec = np.random.default_rng(50 + rt.rank).uniform(-1, 1, count)
        _write(rt, send, vec)
        coll.allreduce(comm, send.addr, recv.addr, count, SUM_F64)
        return _typed_read(rt, recv, np.float64, count).tobytes()

    out = run_emulated(4, fn, node_ids=[0, 0, 1, 1], segment_bytes=2 * MIB)
    contribs = [np.random.default_rng(50 + r).uniform(-1, 1, count)
                for r in range(4)]
    want = allreduce_oracle(contribs, np.add).tobytes()
    assert all(o == want for o in out)


def test_allreduce_in_place():
    count = 257

    def fn(rt):
        comm = coll.bootstrap(rt, rt.world)
        buf = rt.alloc_symmetric(count * 8, 0)
        vec = np.arange(count, dtype=np.float64) * (rt.rank + 1)
        _write(rt, buf, vec)
        coll.allreduce(comm, buf.addr, buf.addr, count, SUM_F64)
        return _typed_read(rt, buf, np.float64, count).tobytes()

    out = run_emulated(2, fn, segment_bytes=2 * MIB)
    contribs = [np.arange(count, dtype=np.float64) * (r + 1) for r in range(2)]
    want = allreduce_oracle(contribs, np.add).tobytes()
    assert all(o == want for o in out)


def test_type_mismatch_misaligned_offset():
    def fn(rt):
        comm = coll.bootstrap(rt, rt.world)
        rec = rt.alloc_symmetric(4096, 0)
        odd = GlobalAddress(rec.addr.rank, 0, rec.addr.offset + 4)
        with pytest.raises(TypeMismatch):
            coll.reduce(comm, odd, rec.addr, 8, SUM_F64, root=0)
        return True

    run_emulated(2, fn, segment_bytes=2 * MIB)


def test_device_bcast_caches_one_communicator():
    def fn(rt):
        rec = rt.alloc_symmetric(4096, 0)
        if rt.rank == 0:
            rt.gm.arena(0)[rec.addr.offset:rec.addr.offset + 4096] = 7
        for _ in range(3):
            coll.device_bcast(rt, rec.addr, 4096, rt.world)
        boots = rt.bootstrap_count
        assert (rt.gm.arena(0)[rec.addr.offset:rec.addr.offset + 4096] == 7).all()
        sub = rt.group_create([rt.endpoint(r, 0) for r in range(rt.nranks)])
        coll.device_bcast(rt, rec.addr, 4096, sub)
        rt.group_free(sub)
        assert sub.id not in rt.comm_cache
        return boots

    boots = run_emulated(2, fn, segment_bytes=2 * MIB)
    assert boots == [1, 1]


def test_endpoint_granularity_small():
    count = 1024

    def fill_and_reduce(rt):
        send = {}
        recv = {}
        for d in range(rt.cfg.devices_per_rank):
            send[d] = rt.alloc_symmetric(count * 8, d)
            recv[d] = rt.alloc_symmetric(count * 8, d)
        world = rt.world.members
        for i, ep in enumerate(world):
            if ep.rank != rt.rank:
                continue
            vec = np.sin(np.arange(count) + i)
            _write(rt, send[ep.device], vec, device=ep.device)
        comm = coll.bootstrap(rt, rt.world)
        coll.allreduce(comm, send[0].addr, recv[0].addr, count, SUM_F64)
        return _typed_read(rt, recv[0], np.float64, count).tobytes()

    one = run_emulated(1, fill_and_reduce, devices_per_rank=2,
                       segment_bytes=2 * MIB)[0]
    two = run_emulated(2, fill_and_reduce, devices_per_rank=1,
                       segment_bytes=2 * MIB)
    assert one == two[0] == two[1]


def test_disjoint_communicators_concurrently():
    def fn(rt):
        lo = rt.rank < 2
        pair = [rt.endpoint(0, 0), rt.endpoint(1, 0)] if lo else \
            [rt.endpoint(2, 0), rt.endpoint(3, 0)]
        g = rt.group_create(pair)
        comm = coll.bootstrap(rt, g)
        rec = rt.alloc_symmetric(512 * 1024, 0)
        root_rank = 0 if lo else 2
        fill = 11 if lo else 22
        if rt.rank == root_rank:
            rt.gm.arena(0)[rec.addr.offset:rec.addr.offset + 512 * 1024] = fill
        coll.bcast(comm, rec.addr, 512 * 1024, root=0)
        data = rt.gm.arena(0)[rec.addr.offset:rec.addr.offset + 512 * 1024]
        assert (data == fill).all()
        return True

    run_emulated(4, fn, node_ids=[0, 0, 1, 1], segment_bytes=4 * MIB)
