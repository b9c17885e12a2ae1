import threading
import time

import numpy as np
import pytest

from diomp.errors import StreamClosed
from diomp.streams import StreamPool


def test_lazy_creation_and_reuse():
    pool = StreamPool(0, max_active=8)
    s = pool.acquire()
    assert pool.created_count == 1
    pool.release(s)
    s2 = pool.acquire()
    assert s2.id == s.id and pool.created_count == 1
    pool.shutdown()


def test_created_count_bounded_by_concurrency():
    pool = StreamPool(0, max_active=8)
    for _ in range(100):
        s = pool.acquire()
        s.submit(lambda: None)
        pool.release(s)
    assert pool.created_count == 1
    held = [pool.acquire() for _ in range(8)]
    for s in held:
        pool.release(s)
    assert pool.created_count <= 8
    pool.shutdown()


def test_submit_runs_task_and_copies():
    pool = StreamPool(0, max_active=2)
    src = np.arange(1024, dtype=np.uint8)
    dst = np.zeros(1024, dtype=np.uint8)
    s = pool.acquire()
    event = s.submit(lambda: dst.__setitem__(slice(None), src))
    assert event.wait(5)
    assert np.array_equal(dst, src)
    pool.shutdown()


def test_two_submits_fifo():
    pool = StreamPool(0, max_active=2)
    s = pool.acquire()
    order = []
    gate = threading.Event()
    e1 = s.submit(lambda: (gate.wait(5), order.append(1)))
    e2 = s.submit(lambda: order.append(2))
    assert not e2.completed
    gate.set()
    assert e2.wait(5)
    assert order == [1, 2]
    assert e1.completed   # event monotonicity: e2 done implies e1 done
    pool.shutdown()


def test_cross_stream_interleave_preserves_per_stream_order():
    pool = StreamPool(0, max_active=4)
    streams = [pool.acquire() for _ in range(3)]
    log = []
    lock = threading.Lock()
    for i in range(10):
        for s in streams:
            def task(sid=s.id, seq=i):
                with lock:
                    log.append((sid, seq))
            s.submit(task)
    pool.sync_all()
    for s in streams:
        seqs = [seq for sid, seq in log if sid == s.id]
        assert seqs == sorted(seqs)
    pool.shutdown()


def test_submit_to_idle_stream_raises():
    pool = StreamPool(0, max_active=2)
    s = pool.acquire()
    pool.release(s)
    with pytest.raises(StreamClosed):
        s.submit(lambda: None)
    pool.shutdown()


def test_half_release_four_of_eight_completed():
    pool = StreamPool(0, max_active=8)
    streams = [pool.acquire() for _ in range(8)]
    gate = threading.Event()
    for s in streams[:4]:            # these stay busy
        s.submit(lambda: gate.wait(10))
    for s in streams[4:]:            # these finish immediately
        s.submit(lambda: None).wait(5)
    time.sleep(0.02)                 # let the finished tasks retire
    released = pool.enforce_bound()
    completed, got = pool.audit.enforcements[-1]
    assert (completed, released, got) == (4, 2, 2)
    gate.set()
    pool.shutdown()


def test_half_release_minimum_one():
    pool = StreamPool(0, max_active=8)
    streams = [pool.acquire() for _ in range(8)]
    gate = threading.Event()
    for s in streams[:7]:
        s.submit(lambda: gate.wait(10))
    streams[7].submit(lambda: None).wait(5)
    time.sleep(0.02)
    released = pool.enforce_bound()
    completed, _ = pool.audit.enforcements[-1]
    assert (completed, released) == (1, 1)
    gate.set()
    pool.shutdown()


def test_enforce_blocks_on_oldest_when_none_completed():
    pool = StreamPool(0, max_active=4)
    streams = [pool.acquire() for _ in range(4)]
    gates = [threading.Event() for _ in range(4)]
    for s, g in zip(streams, gates):
        s.submit(lambda g=g: g.wait(10))
    releaser = threading.Thread(target=pool.enforce_bound)
    releaser.start()
    time.sleep(0.05)
    assert releaser.is_alive()       # blocked on the oldest stream
    gates[0].set()                   # oldest completes
    releaser.join(timeout=5)
    assert not releaser.is_alive()
    assert pool.audit.enforcements[-1] == (0, 1)
    for g in gates[1:]:
        g.set()
    pool.shutdown()


@pytest.mark.parametrize("max_active", [1, 2, 8])
def test_randomized_bound_stress(max_active):
    pool = StreamPool(0, max_active=max_active)
    rng = np.random.default_rng(max_active)
    for i in range(400):
        s = pool.acquire()
        if rng.random() < 0.3:
            s.submit(lambda d=rng.random() * 1e-4: time.sleep(d))
        else:
            s.submit(lambda: None)
        if rng.random() < 0.7:
            pool.release(s)
    assert pool.audit.max_active_seen <= max_active
    for completed, released in pool.audit.enforcements:
        assert released == max(1, -(-completed // 2))
    pool.shutdown()


def test_sync_all_linearizes_prior_submissions():
    pool = StreamPool(0, max_active=4)
    streams = [pool.acquire() for _ in range(4)]
    events = [s.submit(lambda: time.sleep(0.005)) for s in streams for _ in range(3)]
    late = []

    def submitter():
        for _ in range(10):
            try:
                late.append(streams[0].submit(lambda: None))
            except StreamClosed:
                return
            time.sleep(0.001)

    t = threading.Thread(target=submitter)
    t.start()
    pool.sync_all()
    assert all(e.completed for e in events)
    t.join(timeout=5)
    pool.shutdown()
