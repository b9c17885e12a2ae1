"""In-process invariant suite.

Runs every runtime property at small scale, using two emulated ranks wired
through the shared-memory transport (plus pure single-process checks where
no peer is needed), and prints one PASS/FAIL line per property. The
launcher's `selftest` subcommand drives this; the exit code reflects
failures. DIOMP_FAULT_INJECT exists so a deliberately broken build shows up
here (e.g. alloc_overlap must fail the non-overlap property).
"""

from __future__ import annotations

import os
import time
import traceback

import numpy as np

from . import collectives as coll
from .allocators import BuddyAllocator, LinearAllocator
from .apps import bench as bench_mod
from .apps.cannon import MatmulSpec, cannon_matmul
from .apps.stencil import StencilSpec, run_stencil
from .emulate import run_emulated
from .errors import InvalidAddress, StreamMismatch
from .global_memory import (AllocatorKind, GlobalMemory, SegmentConfig,
                            TransferKind)
from .streams import StreamPool
from .topology import TopologyMap, classify_path, full_peer_matrix

SEG = 4 * 1024 * 1024


def _emulate(nranks, fn, **kw):
    kw.setdefault("segment_bytes", SEG)
    kw.setdefault("transport", "shm")
    kw.setdefault("node_ids", [0] * nranks)
    kw.setdefault("timeout", 30.0)
    return run_emulated(nranks, fn, **kw)


# -- global_memory ------------------------------------------------------

def prop_symmetric_offset_agreement():
    ops = _random_alloc_ops(seed=11, steps=60)

    def fn(rt):
        return _apply_ops(rt, ops)

    ledgers = _emulate(2, fn)
    assert ledgers[0] == ledgers[1], "rank ledgers diverged"
    replay = GlobalMemory(SegmentConfig(SEG, AllocatorKind.Buddy), 1)
    live = {}
    for kind, size, token in ops:
        if kind == "alloc":
            live[token] = replay.local_alloc_symmetric(size, 0)
        else:
            replay.local_free(live.pop(token))
    assert ledgers[0] == replay.symmetric_ledger(0), "replay oracle disagrees"


def prop_non_overlap():
    gm = GlobalMemory(SegmentConfig(SEG, AllocatorKind.Buddy), 1)
    rng = np.random.default_rng(5)
    recs = []
    for _ in range(200):
        if recs and rng.random() < 0.4:
            gm.local_free(recs.pop(int(rng.integers(len(recs)))))
        else:
            recs.append(gm.local_alloc_symmetric(int(rng.integers(1, 60000)), 0))
    assert not gm.live_ranges_overlap(0), "live ranges overlap"


def prop_buddy_rounding():
    buddy = BuddyAllocator(1 << 20)
    for size in (1, 255, 256, 257, 4096, 5000, 65536):
        want = 1 << max((size - 1).bit_length(), 8)
        assert buddy.block_size(size) == want, f"buddy rounding of {size}"
    lin = LinearAllocator(1 << 20, alignment=64)
    for size in (1, 63, 64, 65, 1000):
        assert lin.block_size(size) == (size + 63) // 64 * 64, f"linear {size}"


def prop_translate_roundtrip():
    def fn(rt):
        rec = rt.alloc_symmetric(4096, 0)
        p = rec.addr
        q = rt.translate(p, 1 - rt.rank)
        assert rt.translate(q, rt.rank) == p, "translate round trip broken"
        assert rt.translate(p, rt.rank) == p, "self translate not identity"
        return True

    _emulate(2, fn)


def prop_cache_single_fetch():
    def fn(rt):
        cell = rt.alloc_asymmetric(1024 * (rt.rank + 1), 0)
        if rt.rank == 0:
            for _ in range(10):
                rt.resolve_cell(cell, 1)
            first = rt.engine.stats.cell_fetches_sent()
            assert first == 1, f"expected 1 cell fetch, saw {first}"
        rt.barrier(rt.world)
        rt.free(cell)
        cell2 = rt.alloc_asymmetric(2048, 0)
        if rt.rank == 0:
            rt.resolve_cell(cell2, 1)
            assert rt.engine.stats.cell_fetches_sent() == 2
        rt.barrier(rt.world)
        return True

    _emulate(2, fn)


def prop_free_then_use_detection():
    def fn(rt):
        rec = rt.alloc_symmetric(8192, 0)
        addr = rt.translate(rec.addr, 1 - rt.rank)
        rt.free(rec)
        if rt.rank == 0:
            try:
                rt.put(addr, b"x" * 64, 64, TransferKind.H2D).wait(5)
            except InvalidAddress:
                return True
            raise AssertionError("put into freed range did not fail")
        return True

    _emulate(2, fn)


# -- topology_transport --------------------------------------------------

def prop_path_roundtrip_exact():
    def fn(rt):
        rec0 = rt.alloc_symmetric(16384, 0)
        rec1 = rt.alloc_symmetric(16384, 1)
        rt.barrier(rt.world)
        if rt.rank == 0:
            rng = np.random.default_rng(3)
            for size in (0, 1, 3, 4, 64, 4096, 8192):
                data = rng.integers(0, 256, size, dtype=np.uint8)
                # IntraProcess: self, same device
                dst = rt.translate(rec0.addr, 0)
                rt.put(dst, data, size, TransferKind.H2D)
                rt.fence(rt.world)
                back = bytearray(size)
                rt.get(dst, back, size, TransferKind.D2H).wait(10)
                assert bytes(back) == data.tobytes(), f"intra size {size}"
                # PeerFabric: device 0 -> device 1, D2D both ways
                rt.put(rec1.addr, dst, size, TransferKind.D2D)
                rt.fence(rt.world)
                back = bytearray(size)
                rt.get(rec1.addr, back, size, TransferKind.D2H).wait(10)
                assert bytes(back) == data.tobytes(), f"peer size {size}"
                # message path toward rank 1 (IPC or InterNode per node map)
                rdst = rt.translate(rec0.addr, 1)
                rt.put(rdst, data, size, TransferKind.H2D)
                rt.fence(rt.world)
                back = bytearray(size)
                rt.get(rdst, back, size, TransferKind.D2H).wait(10)
                assert bytes(back) == data.tobytes(), f"remote size {size}"
        rt.barrier(rt.world)
        return True

    _emulate(2, fn, devices_per_rank=2, node_ids=[0, 1])   # InterNode via shm
    _emulate(2, fn, devices_per_rank=2, node_ids=[0, 0], transport="tcp")  # IPC


def prop_classify_total_symmetric():
    topo = TopologyMap(4, 2, (0, 0, 1, 1), (10, 11, 12, 13), full_peer_matrix(2))
    eps = topo.endpoints()
    for a in eps:
        for b in eps:
            assert classify_path(a, b, topo) == classify_path(b, a, topo)


def prop_no_lost_completions():
    def fn(rt):
        rec = rt.alloc_symmetric(4096, 0)
        if rt.rank == 0:
            handles = [rt.put(rt.translate(rec.addr, 1), b"y" * 512, 512,
                              TransferKind.H2D) for _ in range(64)]
            deadline = time.monotonic() + 20
            while not all(h.done() for h in handles):
                rt.progress()
                assert time.monotonic() < deadline, "completions lost"
        rt.barrier(rt.world)
        return True

    _emulate(2, fn)


def prop_fragmentation_transparency():
    def fn(rt):
        rec = rt.alloc_symmetric(4 * 1024 * 1024, 0)
        if rt.rank == 0:
            n = rt.cfg.shm_ring_bytes + 12345    # forces multiple ring fragments
            data = np.random.default_rng(9).integers(0, 256, n, dtype=np.uint8)
            rt.put(rt.translate(rec.addr, 1), data, n, TransferKind.H2D)
            rt.fence(rt.world)
            back = bytearray(n)
            rt.get(rt.translate(rec.addr, 1), back, n, TransferKind.D2H).wait(20)
            assert bytes(back) == data.tobytes()
        rt.barrier(rt.world)
        return True

    _emulate(2, fn, segment_bytes=8 * 1024 * 1024)


def prop_one_sided_target_passive():
    def fn(rt):
        rec = rt.alloc_symmetric(65536, 0)
        rt.barrier(rt.world)
        if rt.rank == 0:
            dst = rt.translate(rec.addr, 1)
            for _ in range(20):
                rt.put(dst, b"z" * 4096, 4096, TransferKind.H2D)
            rt.fence(rt.world)
            buf = bytearray(4096)
            rt.get(dst, buf, 4096, TransferKind.D2H).wait(10)
        else:
            time.sleep(0.3)    # application thread does no runtime work
        rt.barrier(rt.world)
        if rt.rank == 1:
            served = rt.engine.stats.serve_thread_ids
            allowed = {rt.engine._thread.ident}
            assert served <= allowed, f"app thread served RMA: {served - allowed}"
        return True

    _emulate(2, fn, node_ids=[0, 1], transport="tcp")


# -- stream_engine -------------------------------------------------------

def prop_bounded_concurrency():
    pool = StreamPool(0, max_active=2, sim_task_us=0)
    rng = np.random.default_rng(1)
    held = []
    for _ in range(300):
        if held and rng.random() < 0.45:
            pool.release(held.pop(int(rng.integers(len(held)))))
        else:
            s = pool.acquire()
            s.submit(lambda: None)
            held.append(s)
    assert pool.audit.max_active_seen <= 2, "active bound exceeded"
    pool.shutdown()


def prop_half_release_arithmetic():
    pool = StreamPool(0, max_active=8, sim_task_us=0)
    streams = [pool.acquire() for _ in range(8)]
    for s in streams[:4]:
        s.submit(lambda: None).wait(5)
    for s in streams:
        s.synchronize()
    released = pool.enforce_bound()
    completed, got = pool.audit.enforcements[-1]
    assert released == max(1, (completed + 1) // 2) == got, \
        f"released {released} of {completed} completed"
    pool.shutdown()


def prop_per_stream_fifo():
    pool = StreamPool(0, max_active=4, sim_task_us=0)
    log = []
    streams = [pool.acquire() for _ in range(3)]
    for i in range(10):
        for s in streams:
            s.submit(lambda s=s, i=i: log.append((s.id, i)))
    pool.sync_all()
    for sid in {s.id for s in streams}:
        seq = [i for s, i in log if s == sid]
        assert seq == sorted(seq), f"stream {sid} reordered tasks"
    pool.shutdown()


def prop_block_stream_association():
    def fn(rt):
        stream = rt.pools[0].acquire()
        other = rt.pools[0].acquire()
        rec = rt.alloc_symmetric(4096, 0, stream=stream)
        dst = rt.translate(rec.addr, rt.rank)
        rt.put(dst, b"a" * 64, 64, TransferKind.H2D, stream=stream).wait(5)
        for wrong in (None, other):
            try:
                rt.put(dst, b"b" * 64, 64, TransferKind.H2D, stream=wrong)
            except StreamMismatch:
                continue
            raise AssertionError("stream association not enforced")
        rt.pools[0].release(stream)
        rt.pools[0].release(other)
        return True

    _emulate(1, fn)


# -- runtime_core --------------------------------------------------------

def prop_fence_visibility():
    def fn(rt):
        rec = rt.alloc_symmetric(4096, 0)
        if rt.rank == 0:
            rt.put(rt.translate(rec.addr, 1), b"VISIBLE!", 8, TransferKind.H2D)
            rt.fence(rt.world)
        rt.barrier(rt.world)
        if rt.rank == 1:
            assert bytes(rt.gm.view(0, rec.addr.offset, 8)) == b"VISIBLE!"
        return True

    _emulate(2, fn)


def prop_scope_isolation():
    def fn(rt):
        sub = None
        if rt.rank in (0, 1):
            sub = rt.group_create([rt.endpoint(0, 0), rt.endpoint(1, 0)])
        if rt.rank == 2:
            x = 0
            for _ in range(1000):
                x += 1
            t = time.perf_counter()
            rt.barrier(rt.world)
            return t
        if rt.rank == 1:
            time.sleep(0.25)          # withheld member
        rt.barrier(sub)
        t = time.perf_counter()
        rt.barrier(rt.world)
        return t

    res = _emulate(3, fn, node_ids=[0, 0, 0])
    assert res[2] < res[0], "outside rank was delayed by the group barrier"


def prop_group_id_determinism():
    def fn(rt):
        eps = [rt.endpoint(r, 0) for r in range(rt.nranks)]
        g1 = rt.group_create(eps)
        g2 = rt.group_split(g1, color=rt.rank % 2, key=-rt.rank)
        g3 = rt.group_merge(g1, g2)
        return (g1.id, g2.id, g3.id)

    ids = _emulate(4, fn)
    assert ids[0][0] == ids[1][0] == ids[2][0] == ids[3][0]
    assert ids[0][1] == ids[2][1] and ids[1][1] == ids[3][1]
    assert ids[0][2] == ids[2][2]


def prop_hybrid_polling_liveness():
    def fn(rt):
        rec = rt.alloc_symmetric(65536, 0)
        stream_rec = rt.alloc_symmetric(65536, 0)
        streams = [rt.pools[0].acquire() for _ in range(4)]
        if rt.rank == 0:
            dst = rt.translate(rec.addr, 1)
            sdst = rt.translate(stream_rec.addr, 1)
            for i in range(16):
                rt.put(dst, b"p" * 256, 256, TransferKind.H2D)
                rt.put(sdst, b"s" * 256, 256, TransferKind.H2D,
                       stream=streams[i % 4])
            rt.fence(rt.world)
            assert rt.outstanding_rma(rt.world) == 0
            assert rt.outstanding_stream_events(rt.world) == 0
        rt.barrier(rt.world)
        for s in streams:
            rt.pools[0].release(s)
        return True

    _emulate(2, fn, sim_task_us=500)


# -- collectives ---------------------------------------------------------

def _coll_setup(rt, count):
    send = rt.alloc_symmetric(count * 8, 0)
    recv = rt.alloc_symmetric(count * 8, 0)
    vec = np.arange(count, dtype=np.float64) * (rt.rank + 1) - 3.5
    rt.gm.arena(0)[send.addr.offset:send.addr.offset + count * 8] = \
        vec.view(np.uint8)
    return send, recv, vec


def prop_collective_determinism():
    def fn(rt):
        count = 4096
        send, recv, _ = _coll_setup(rt, count)
        comm = coll.bootstrap(rt, rt.world)
        op = coll.ReduceOp(coll.ReduceKind.Sum, coll.ElementType.f64)
        outs = []
        for _ in range(2):
            coll.allreduce(comm, send.addr, recv.addr, count, op)
            outs.append(bytes(rt.gm.view(0, recv.addr.offset, count * 8)))
        assert outs[0] == outs[1], "allreduce not reproducible"
        return outs[0]

    outs = _emulate(2, fn)
    assert outs[0] == outs[1]


def prop_oracle_equivalence():
    def fn(rt):
        count = 1000
        send, recv, vec = _coll_setup(rt, count)
        comm = coll.bootstrap(rt, rt.world)
        op = coll.ReduceOp(coll.ReduceKind.Sum, coll.ElementType.f64)
        coll.allreduce(comm, send.addr, recv.addr, count, op)
        got = np.frombuffer(rt.gm.view(0, recv.addr.offset, count * 8),
                            dtype=np.float64)
        contribs = [np.arange(count) * (r + 1) - 3.5 for r in range(rt.nranks)]
        want = _allreduce_oracle(contribs, np.add, rt.nranks)
        assert np.array_equal(got, want), "allreduce differs from serial oracle"
        return True

    _emulate(2, fn)


def prop_endpoint_granularity():
    def one_rank(rt):
        return _granularity_run(rt, endpoints=2)

    def two_ranks(rt):
        return _granularity_run(rt, endpoints=2)

    single = _emulate(1, one_rank, devices_per_rank=2)[0]
    multi = _emulate(2, two_ranks, devices_per_rank=1)
    assert single == multi[0], "endpoint layouts disagree bitwise"


def prop_collective_isolation():
    def fn(rt):
        pair = (0, 1) if rt.rank < 2 else (2, 3)
        g = rt.group_create([rt.endpoint(pair[0], 0), rt.endpoint(pair[1], 0)])
        comm = coll.bootstrap(rt, g)
        rec = rt.alloc_symmetric(8192, 0)
        fill = pair[0] + 1
        if rt.rank == pair[0]:
            rt.gm.arena(0)[rec.addr.offset:rec.addr.offset + 8192] = fill
        coll.bcast(comm, rec.addr, 8192, root=0)
        data = rt.gm.arena(0)[rec.addr.offset:rec.addr.offset + 8192]
        assert (data == fill).all(), "cross-talk between disjoint communicators"
        return True

    _emulate(4, fn)


# -- apps_bench ----------------------------------------------------------

def prop_matmul_residual():
    def fn(rt):
        return cannon_matmul(rt, MatmulSpec(48, 2), seed=1).residual

    res = _emulate(2, fn)
    assert max(res) <= 1e-12, f"residual {max(res)}"


def prop_overlap_discipline():
    def fn(rt):
        return cannon_matmul(rt, MatmulSpec(64, 2), seed=2).overlap_observed()

    assert all(_emulate(2, fn, sim_task_us=2000)), "no compute/transfer overlap"


def prop_stencil_decomposition_independence():
    spec = StencilSpec(16, 12, 12, steps=4)
    one = _emulate(1, lambda rt: run_stencil(rt, spec).checksum)[0]
    two = _emulate(2, lambda rt: run_stencil(rt, spec).checksum)
    assert one == two[0], "stencil field depends on rank count"


def prop_benchmark_accounting():
    def fn(rt):
        spec = bench_mod.BenchSpec(bench_mod.BenchKind.PutLatency,
                                   (64, 1024), iters=5, warmup=1)
        rows = bench_mod.run_p2p(rt, spec)
        if rt.rank == 0:
            for row in rows:
                assert row.wire_put_bytes == row.size_bytes * row.iters, \
                    f"wire bytes {row.wire_put_bytes} != {row.size_bytes * row.iters}"
        return True

    _emulate(2, fn)


# -- cli_launcher ---------------------------------------------------------

def prop_node_assignment_determinism():
    from .cli import parse_args
    plan_a = parse_args(["-n", "4", "--nodes", "2", "selftest"])
    plan_b = parse_args(["-n", "4", "--nodes", "2", "selftest"])
    assert plan_a.node_ids == plan_b.node_ids == [0, 0, 1, 1]


def prop_clean_teardown():
    before = {f for f in os.listdir("/dev/shm") if f.startswith("diomp-")}
    _emulate(2, lambda rt: rt.barrier(rt.world))
    after = {f for f in os.listdir("/dev/shm") if f.startswith("diomp-")}
    assert after <= before, f"leaked shared memory: {after - before}"


# -- helpers --------------------------------------------------------------

def _random_alloc_ops(seed, steps):
    rng = np.random.default_rng(seed)
    ops, live, token = [], [], 0
    for _ in range(steps):
        if live and rng.random() < 0.35:
            ops.append(("free", 0, live.pop(int(rng.integers(len(live))))))
        else:
            ops.append(("alloc", int(rng.integers(1, 50000)), token))
            live.append(token)
            token += 1
    return ops


def _apply_ops(rt, ops):
    live = {}
    for kind, size, token in ops:
        if kind == "alloc":
            live[token] = rt.alloc_symmetric(size, 0)
        else:
            rt.free(live.pop(token))
    return rt.gm.symmetric_ledger(0)


def _allreduce_oracle(contribs, ufunc, k):
    count = len(contribs[0])
    out = np.empty(count)
    for b in range(k):
        lo, hi = b * count // k, (b + 1) * count // k
        acc = contribs[b][lo:hi].copy()
        for t in range(1, k):
            acc = ufunc(acc, contribs[(b + t) % k][lo:hi])
        out[lo:hi] = acc
    return out


def _granularity_run(rt, endpoints):
    count = 2048
    op = coll.ReduceOp(coll.ReduceKind.Sum, coll.ElementType.f64)
    devs = range(rt.cfg.devices_per_rank)
    send = {d: rt.alloc_symmetric(count * 8, d) for d in devs}
    recv = {d: rt.alloc_symmetric(count * 8, d) for d in devs}
    world = rt.world.members
    for d in devs:
        e = next(i for i, ep in enumerate(world)
                 if ep.rank == rt.rank and ep.device == d)
        vec = np.sqrt(np.arange(count) + 1.0) * (e + 1)
        rt.gm.arena(d)[send[d].addr.offset:send[d].addr.offset + count * 8] = \
            vec.view(np.uint8)
    comm = coll.bootstrap(rt, rt.world)
    coll.allreduce(comm, send[0].addr, recv[0].addr, count, op)
    return bytes(rt.gm.view(0, recv[0].addr.offset, count * 8))


PROPERTIES = [
    ("global_memory/symmetric-offset-agreement", prop_symmetric_offset_agreement),
    ("global_memory/non-overlap", prop_non_overlap),
    ("global_memory/buddy-rounding", prop_buddy_rounding),
    ("global_memory/translate-roundtrip", prop_translate_roundtrip),
    ("global_memory/cache-single-fetch", prop_cache_single_fetch),
    ("global_memory/free-then-use-detection", prop_free_then_use_detection),
    ("topology_transport/path-roundtrip-exact", prop_path_roundtrip_exact),
    ("topology_transport/classify-total-symmetric", prop_classify_total_symmetric),
    ("topology_transport/no-lost-completions", prop_no_lost_completions),
    ("topology_transport/fragmentation-transparency", prop_fragmentation_transparency),
    ("topology_transport/one-sided-target-passive", prop_one_sided_target_passive),
    ("stream_engine/bounded-concurrency", prop_bounded_concurrency),
    ("stream_engine/half-release-arithmetic", prop_half_release_arithmetic),
    ("stream_engine/per-stream-fifo", prop_per_stream_fifo),
    ("stream_engine/block-stream-association", prop_block_stream_association),
    ("runtime_core/fence-visibility", prop_fence_visibility),
    ("runtime_core/scope-isolation", prop_scope_isolation),
    ("runtime_core/group-id-determinism", prop_group_id_determinism),
    ("runtime_core/hybrid-polling-liveness", prop_hybrid_polling_liveness),
    ("collectives/determinism", prop_collective_determinism),
    ("collectives/oracle-equivalence", prop_oracle_equivalence),
    ("collectives/endpoint-granularity", prop_endpoint_granularity),
    ("collectives/isolation", prop_collective_isolation),
    ("apps_bench/matmul-residual", prop_matmul_residual),
    ("apps_bench/overlap-discipline", prop_overlap_discipline),
    ("apps_bench/stencil-decomposition-independence",
     prop_stencil_decomposition_independence),
    ("apps_bench/benchmark-accounting", prop_benchmark_accounting),
    ("cli_launcher/node-assignment-determinism", prop_node_assignment_determinism),
    ("cli_launcher/clean-teardown", prop_clean_teardown),
]


def run_selftest(only: list[str] | None = None, report=print) -> int:
    """Runs the suite; returns the number of failures."""
    failures = 0
    for name, fn in PROPERTIES:
        if only and not any(sel in name for sel in only):
            continue
        try:
            fn()
        except Exception:
            failures += 1
            report(f"FAIL {name}")
            report("     " + traceback.format_exc().strip().replace("\n", "\n     "))
        else:
            report(f"PASS {name}")
    return failures
