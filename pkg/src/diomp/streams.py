"""Simulated device work queues.

A Stream is an in-order asynchronous task queue backed by one worker
thread; a StreamEvent marks a position in that order. StreamPool implements
the device-side scheduling policies: streams are created lazily, idle
streams are reused, and the number of simultaneously active streams is
bounded. When an acquire would exceed the bound, the pool synchronizes and
releases half of the already-completed active streams (at least one); if
none have completed it blocks on the oldest active stream.

DIOMP_SIM_TASK_US adds an artificial per-task latency so benchmarks can
observe communication/computation overlap; it is zero by default.
"""

from __future__ import annotations

import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import StreamClosed

DEFAULT_MAX_ACTIVE = 8


def _env_int(name: str, default: int) -> int:
    try:
        return int(os.environ.get(name, default))
    except ValueError:
        return default


class StreamEvent:
    """Completion marker for one submitted task."""

    def __init__(self, stream_id: int, seq: int):
        self.stream_id = stream_id
        self.seq = seq
        self._done = threading.Event()
        self.completed_at: float | None = None

    @property
    def completed(self) -> bool:
        return self._done.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    def _fire(self):
        self.completed_at = time.perf_counter()
        self._done.set()


class Stream:
    """FIFO task queue; tasks run on a dedicated worker thread."""

    IDLE = "idle"
    ACTIVE = "active"

    def __init__(self, stream_id: int, device: int, sim_task_us: int = 0):
        self.id = stream_id
        self.device = device
        self.state = Stream.IDLE
        self.sim_task_us = sim_task_us
        self._tasks: deque[tuple] = deque()
        self._cv = threading.Condition()
        self._submitted = 0
        self._completed = 0
        self._stop = False
        self._worker = threading.Thread(
            target=self._run, name=f"diomp-stream-{device}-{stream_id}", daemon=True)
        self._worker.start()

    def submit(self, task) -> StreamEvent:
        with self._cv:
            if self.state != Stream.ACTIVE:
                raise StreamClosed(f"stream {self.id} is {self.state}")
            self._submitted += 1
            event = StreamEvent(self.id, self._submitted)
            self._tasks.append((task, event))
            self._cv.notify_all()
        return event

    def synchronize(self, timeout: float | None = None):
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while self._completed < self._submitted:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"stream {self.id} did not drain")
                self._cv.wait(remaining if remaining is not None else 0.5)

    def is_quiescent(self) -> bool:
        with self._cv:
            return self._completed == self._submitted

    def _run(self):
        while True:
            with self._cv:
                while not self._tasks and not self._stop:
                    self._cv.wait()
                if self._stop and not self._tasks:
                    return
                task, event = self._tasks.popleft()
            if self.sim_task_us > 0:
                time.sleep(self.sim_task_us / 1e6)
            try:
                task()
            finally:
                with self._cv:
                    self._completed = event.seq
                    event._fire()
                    self._cv.notify_all()

    def _shutdown(self):
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        self._worker.join(timeout=10)


@dataclass
class PoolAudit:
    """Transition log consumed by the stress tests."""

    max_active_seen: int = 0
    created: int = 0
    enforcements: list[tuple[int, int]] = field(default_factory=list)  # (completed, released)
    transitions: list[tuple[str, int]] = field(default_factory=list)   # (event, active_count)

    def record(self, event: str, active: int):
        self.max_active_seen = max(self.max_active_seen, active)
        self.transitions.append((event, active))


class StreamPool:
    """Per-device stream pool with lazy creation, reuse and a bounded
    active set."""

    def __init__(self, device: int, max_active: int | None = None,
                 sim_task_us: int | None = None):
        self.device = device
        self.max_active = max_active if max_active is not None else \
            _env_int("DIOMP_MAX_ACTIVE_STREAMS", DEFAULT_MAX_ACTIVE)
        if self.max_active < 1:
            raise ValueError("max_active must be >= 1")
        self.sim_task_us = sim_task_us if sim_task_us is not None else \
            _env_int("DIOMP_SIM_TASK_US", 0)
        self._idle: list[Stream] = []
        self._active: dict[int, Stream] = {}   # insertion order = acquire order
        self._all: list[Stream] = []
        self._next_id = 0
        self._lock = threading.RLock()
        self.audit = PoolAudit()

    @property
    def created_count(self) -> int:
        return len(self._all)

    def active_count(self) -> int:
        with self._lock:
            return len(self._active)

    def acquire(self) -> Stream:
        while True:
            with self._lock:
                if len(self._active) < self.max_active:
                    if self._idle:
                        stream = self._idle.pop()
                        event = "acquire_reuse"
                    else:
                        stream = Stream(self._next_id, self.device, self.sim_task_us)
                        self._next_id += 1
                        self._all.append(stream)
                        self.audit.created += 1
                        event = "acquire_create"
                    stream.state = Stream.ACTIVE
                    self._active[stream.id] = stream
                    self.audit.record(event, len(self._active))
                    return stream
            # At the bound: make room, then retry the fast path.
            self.enforce_bound()

    def release(self, stream: Stream):
        """Synchronize a stream and return it to the idle list."""
        stream.synchronize()
        with self._lock:
            if stream.id in self._active:
                del self._active[stream.id]
                stream.state = Stream.IDLE
                self._idle.append(stream)
                self.audit.record("release", len(self._active))

    def enforce_bound(self) -> int:
        """Release max(1, ceil(completed/2)) finished active streams.

        If nothing has finished, blocks on the oldest active stream and
        releases it. Returns the number of streams released.
        """
        blocker = None
        with self._lock:
            completed = [s for s in self._active.values() if s.is_quiescent()]
            if completed:
                n = max(1, (len(completed) + 1) // 2)
                victims = completed[:n]
                for s in victims:
                    del self._active[s.id]
                    s.state = Stream.IDLE
                    self._idle.append(s)
                self.audit.enforcements.append((len(completed), n))
                self.audit.record("enforce_release", len(self._active))
                return n
            if self._active:
                blocker = next(iter(self._active.values()))
        if blocker is None:
            return 0
        blocker.synchronize()
        with self._lock:
            if blocker.id in self._active:
                del self._active[blocker.id]
                blocker.state = Stream.IDLE
                self._idle.append(blocker)
                self.audit.enforcements.append((0, 1))
                self.audit.record("enforce_blocking", len(self._active))
                return 1
        return 0

    def sync_all(self):
        """Drain every stream; afterwards all streams are idle."""
        while True:
            with self._lock:
                streams = list(self._active.values())
            if not streams:
                break
            for s in streams:
                s.synchronize()
                self.release(s)
        for s in list(self._idle):
            s.synchronize()

    def shutdown(self):
        self.sync_all()
        for s in self._all:
            s._shutdown()
