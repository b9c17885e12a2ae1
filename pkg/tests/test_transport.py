import threading
import time

import numpy as np
import pytest

from diomp.config import ResolvedConfig
from diomp.emulate import free_port, run_emulated
from diomp.errors import InvalidAddress, KindMismatch, TransportFailure
from diomp.global_memory import (AllocatorKind, GlobalAddress, GlobalMemory,
                                 SegmentConfig, TransferKind)
from diomp.runtime import Runtime
from diomp.transport import HandleState, TransportEngine
from diomp.wire import Opcode

MIB = 1024 * 1024
SIZES = [0, 1, 3, 4, 64, 4096, 8192]


def _fill(rt, rec, data):
    rt.gm.arena(rec.addr.device)[rec.addr.offset:rec.addr.offset + len(data)] = data


def _read(rt, addr, n):
    return bytes(rt.gm.view(addr.device, addr.offset, n))


def roundtrip_worker(rt):
    """Exercises put->fence->get across all reachable paths and valid kinds."""
    rec0 = rt.alloc_symmetric(64 * 1024, 0)
    rec1 = rt.alloc_symmetric(64 * 1024, 1)
    stage = rt.alloc_symmetric(64 * 1024, 0)
    rt.barrier(rt.world)
    if rt.rank == 0:
        rng = np.random.default_rng(1)
        peer = 1
        targets = [rt.translate(rec0.addr, 0),     # IntraProcess
                   rec1.addr,                      # PeerFabric via D2D
                   rt.translate(rec0.addr, peer)]  # message path
        for size in SIZES:
            data = rng.integers(0, 256, size, dtype=np.uint8).tobytes()
            for dst in targets:
                # H2D put + D2H get
                rt.put(dst, data, size, TransferKind.H2D)
                rt.fence(rt.world)
                back = bytearray(size)
                rt.get(dst, back, size, TransferKind.D2H).wait(20)
                assert bytes(back) == data, f"H2D/D2H {dst} size {size}"
                # D2D put + D2D get through the staging allocation
                _fill(rt, stage, np.zeros(size, np.uint8))
                _fill(rt, stage, np.frombuffer(data, np.uint8))
                rt.put(dst, GlobalAddress(0, 0, stage.addr.offset), size,
                       TransferKind.D2D)
                rt.fence(rt.world)
                _fill(rt, stage, np.zeros(size, np.uint8))
                rt.get(dst, GlobalAddress(0, 0, stage.addr.offset), size,
                       TransferKind.D2D).wait(20)
                assert _read(rt, stage.addr, size) == data, \
                    f"D2D/D2D {dst} size {size}"
    rt.barrier(rt.world)
    return True


def test_roundtrips_all_paths_shm_nodes():
    run_emulated(2, roundtrip_worker, devices_per_rank=2, node_ids=[0, 0])


def test_roundtrips_all_paths_tcp_internode():
    run_emulated(2, roundtrip_worker, devices_per_rank=2, node_ids=[0, 1],
                 transport="tcp")


def test_zero_byte_put_no_wire_traffic():
    def fn(rt):
        rec = rt.alloc_symmetric(4096, 0)
        if rt.rank == 0:
            before = rt.engine.stats.sent_frames[Opcode.PUT]
            h = rt.put(rt.translate(rec.addr, 1), b"", 0, TransferKind.H2D)
            assert h.state is HandleState.RemoteDone
            assert rt.engine.stats.sent_frames[Opcode.PUT] == before
        rt.barrier(rt.world)
        return True

    run_emulated(2, fn)


def test_kind_mismatch_rejections():
    def fn(rt):
        rec = rt.alloc_symmetric(4096, 0)
        dst = rt.translate(rec.addr, 1 - rt.rank)
        buf = bytearray(64)
        with pytest.raises(KindMismatch):
            rt.put(dst, b"x" * 64, 64, TransferKind.H2H)
        with pytest.raises(KindMismatch):
            rt.put(dst, b"x" * 64, 64, TransferKind.D2H)
        with pytest.raises(KindMismatch):
            rt.put(dst, b"x" * 64, 64, TransferKind.D2D)     # host src for D2D
        with pytest.raises(KindMismatch):
            rt.put(dst, rec.addr, 64, TransferKind.H2D)      # device src for H2D
        with pytest.raises(KindMismatch):
            rt.get(dst, buf, 64, TransferKind.H2H)
        with pytest.raises(KindMismatch):
            rt.get(dst, buf, 64, TransferKind.H2D)
        with pytest.raises(KindMismatch):
            rt.get(dst, buf, 64, TransferKind.D2D)           # host dst for D2D
        with pytest.raises(KindMismatch):
            rt.get(dst, rec.addr, 64, TransferKind.D2H)      # device dst for D2H
        return True

    run_emulated(2, fn)


def test_invalid_address_rejected_locally_and_remotely():
    def fn(rt):
        rec = rt.alloc_symmetric(4096, 0)
        if rt.rank == 0:
            # overrun: caught by the symmetric mirror before any wire traffic
            with pytest.raises(InvalidAddress):
                rt.put(rt.translate(rec.addr, 1), b"x" * 8192, 8192,
                       TransferKind.H2D)
            # asymmetric-region garbage offset: rejected by the owner
            bogus = GlobalAddress(1, 0, rt.gm.asym_base(0) + 4096)
            with pytest.raises(InvalidAddress):
                rt.put(bogus, b"x" * 64, 64, TransferKind.H2D).wait(20)
            buf = bytearray(64)
            with pytest.raises(InvalidAddress):
                rt.get(bogus, buf, 64, TransferKind.D2H).wait(20)
        rt.barrier(rt.world)
        return True

    run_emulated(2, fn)


def test_one_ack_per_put_fragment():
    def fn(rt):
        rec = rt.alloc_symmetric(4 * MIB, 0)
        if rt.rank == 0:
            stats = rt.engine.stats
            n = rt.cfg.shm_ring_bytes + 777     # 2 fragments on the ring
            rt.put(rt.translate(rec.addr, 1), b"q" * n, n, TransferKind.H2D)
            rt.fence(rt.world)
            assert stats.sent_frames[Opcode.PUT] == 2
            assert stats.recv_frames[Opcode.ACK] == 2
        rt.barrier(rt.world)
        return True

    run_emulated(2, fn, node_ids=[0, 0])


def test_concurrent_gets_from_all_ranks_agree():
    def fn(rt):
        rec = rt.alloc_symmetric(64 * 1024, 0)
        if rt.rank == 0:
            payload = np.random.default_rng(2).integers(
                0, 256, 64 * 1024, dtype=np.uint8)
            _fill(rt, rec, payload)
        rt.barrier(rt.world)
        buf = bytearray(64 * 1024)
        rt.get(GlobalAddress(0, 0, rec.addr.offset), buf, 64 * 1024,
               TransferKind.D2H).wait(20)
        rt.barrier(rt.world)
        return bytes(buf)

    views = run_emulated(4, fn, node_ids=[0, 0, 1, 1])
    assert len(set(views)) == 1


def test_progress_from_two_flows_never_double_retires():
    def fn(rt):
        rec = rt.alloc_symmetric(MIB, 0)
        if rt.rank == 0:
            stop = threading.Event()

            def churn():
                while not stop.is_set():
                    rt.progress()

            helper = threading.Thread(target=churn)
            helper.start()
            handles = []
            for i in range(200):
                handles.append(rt.put(rt.translate(rec.addr, 1),
                                      b"r" * 1024, 1024, TransferKind.H2D))
            deadline = time.monotonic() + 20
            while not all(h.done() for h in handles):
                rt.progress()
                assert time.monotonic() < deadline
            stop.set()
            helper.join()
            st = rt.engine.stats
            assert st.retired_ops == st.issued_ops == 200
        rt.barrier(rt.world)
        return True

    run_emulated(2, fn, node_ids=[0, 1], transport="tcp")


def test_progress_idle_returns_zero():
    def fn(rt):
        rt.barrier(rt.world)
        return rt.progress()

    assert run_emulated(2, fn) == [0, 0]


def test_handle_states_monotone_message_path():
    def fn(rt):
        rec = rt.alloc_symmetric(4096, 0)
        if rt.rank == 0:
            h = rt.put(rt.translate(rec.addr, 1), b"m" * 512, 512,
                       TransferKind.H2D)
            assert h.state in (HandleState.LocalDone, HandleState.RemoteDone)
            h.wait(20)
            assert h.state is HandleState.RemoteDone
        rt.barrier(rt.world)
        return True

    run_emulated(2, fn)


def test_peer_death_fails_pending_ops():
    seg = SegmentConfig(2 * MIB, AllocatorKind.Buddy)
    port = free_port()
    engines = {}
    errs = {}

    def boot(rank):
        try:
            cfg = ResolvedConfig(rank=rank, nranks=2, devices_per_rank=1,
                                 node_id=rank, segment=seg,
                                 rendezvous=("127.0.0.1", port),
                                 session="death", timeout=15, process_tag=rank)
            eng = TransportEngine(cfg)
            eng.connect()
            gm = GlobalMemory(seg, 1, rank)
            eng.attach_memory(gm)
            engines[rank] = (eng, gm)
        except Exception as e:          # pragma: no cover
            errs[rank] = e

    threads = [threading.Thread(target=boot, args=(r,)) for r in range(2)]
    [t.start() for t in threads]
    [t.join(15) for t in threads]
    assert not errs
    eng0, gm0 = engines[0]
    eng1, _ = engines[1]
    rec = gm0.local_alloc_symmetric(4096, 0)
    eng1.close()   # peer goes away without draining
    deadline = time.monotonic() + 15
    failed = False
    while time.monotonic() < deadline and not failed:
        try:
            h = eng0.rma_put(1, 0, rec.addr.offset,
                             memoryview(b"x" * 64), (1, 0))
            h.wait(2)
        except TransportFailure:
            failed = True
    assert failed, "ops toward a dead peer must fail with TransportFailure"
    eng0.close()
