"""Micro-benchmarks: point-to-point latency/bandwidth and collective sweeps.

Latency rows time put+fence (or get+wait) per iteration; bandwidth rows
pipeline all puts of a burst behind one fence. Collective rows time the
operation across warm-up plus `iters` repetitions and report the mean.
CSV columns are fixed: kind,size_bytes,iters,mean_us,bw_MiBs; a
log10(baseline/measured) column is appended when a baseline CSV is given.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import collectives as coll
from ..errors import UsageError
from ..global_memory import TransferKind
from ..runtime import Group, Runtime

CSV_HEADER = "kind,size_bytes,iters,mean_us,bw_MiBs"
MIB = 1024 * 1024


class BenchKind(enum.Enum):
    PutLatency = "put"
    GetLatency = "get"
    Bandwidth = "bw"
    Bcast = "bcast"
    Allreduce = "allreduce"


def latency_sizes() -> list[int]:
    """4 bytes to 8 KiB, doubling."""
    return [4 << i for i in range(12)]


def collective_sizes() -> list[int]:
    """128 KiB to 64 MiB, doubling."""
    return [(128 * 1024) << i for i in range(10)]


@dataclass(frozen=True)
class BenchSpec:
    kind: BenchKind
    sizes: tuple[int, ...]
    iters: int = 100
    warmup: int = 5

    def __post_init__(self):
        if self.iters < 1:
            raise UsageError("iters must be >= 1")
        if list(self.sizes) != sorted(self.sizes):
            raise UsageError("sizes must be ascending")


@dataclass
class BenchRow:
    kind: str
    size_bytes: int
    iters: int
    mean_us: float
    bw_mibs: float
    wire_put_bytes: int = 0      # payload bytes moved during the timed loop
    ratio: float | None = None

    def csv(self) -> str:
        base = (f"{self.kind},{self.size_bytes},{self.iters},"
                f"{self.mean_us:.3f},{self.bw_mibs:.3f}")
        if self.ratio is not None:
            base += f",{self.ratio:.4f}"
        return base


def run_p2p(rt: Runtime, spec: BenchSpec) -> list[BenchRow]:
    """Rank 0 drives transfers against rank 1; other ranks just cooperate."""
    if rt.nranks < 2:
        raise UsageError("p2p benchmark needs at least 2 ranks")
    buf_rec = rt.alloc_symmetric(max(spec.sizes), 0)
    rows: list[BenchRow] = []
    rt.barrier(rt.world)
    if rt.rank == 0:
        dst = rt.translate(buf_rec.addr, 1)
        stats = rt.engine.stats
        for size in spec.sizes:
            payload = np.random.default_rng(size).integers(
                0, 256, size, dtype=np.uint8)
            sink = bytearray(size)
            for _ in range(spec.warmup):
                _one_rep(rt, spec.kind, dst, payload, sink, size, spec.iters)
            wire0 = stats.put_bytes_total()
            t0 = time.perf_counter()
            reps = _one_rep(rt, spec.kind, dst, payload, sink, size, spec.iters)
            elapsed = time.perf_counter() - t0
            wire = stats.put_bytes_total() - wire0
            mean_us = elapsed / reps * 1e6
            bw = size * reps / elapsed / MIB
            rows.append(BenchRow(spec.kind.value, size, reps, mean_us, bw, wire))
    rt.barrier(rt.world)
    return rows


def _one_rep(rt, kind, dst, payload, sink, size, iters) -> int:
    if kind is BenchKind.PutLatency:
        for _ in range(iters):
            rt.put(dst, payload, size, TransferKind.H2D)
            rt.fence(rt.world)
        return iters
    if kind is BenchKind.GetLatency:
        for _ in range(iters):
            rt.get(dst, sink, size, TransferKind.D2H).wait(rt.cfg.timeout)
        return iters
    if kind is BenchKind.Bandwidth:
        for _ in range(iters):
            rt.put(dst, payload, size, TransferKind.H2D)
        rt.fence(rt.world)
        return iters
    raise UsageError(f"{kind} is not a point-to-point benchmark")


def run_collective(rt: Runtime, spec: BenchSpec, comm=None) -> list[BenchRow]:
    """Warm-up then `iters` timed repetitions per size; rank 0 reports."""
    if spec.kind not in (BenchKind.Bcast, BenchKind.Allreduce):
        raise UsageError(f"{spec.kind} is not a collective benchmark")
    if comm is None:
        comm = coll.bootstrap(rt, rt.world)
    if comm.size < 2:
        raise UsageError("collective benchmark needs at least 2 endpoints")
    max_size = max(spec.sizes)
    send = rt.alloc_symmetric(max_size, 0)
    recv = rt.alloc_symmetric(max_size, 0)
    op = coll.ReduceOp(coll.ReduceKind.Sum, coll.ElementType.f32)
    rows: list[BenchRow] = []
    for size in spec.sizes:
        def run_once():
            if spec.kind is BenchKind.Bcast:
                coll.bcast(comm, send.addr, size, root=0)
            else:
                coll.allreduce(comm, send.addr, recv.addr, size // 4, op)
        for _ in range(spec.warmup):
            run_once()
        rt.barrier(rt.world)
        t0 = time.perf_counter()
        for _ in range(spec.iters):
            run_once()
        elapsed = time.perf_counter() - t0
        rt.barrier(rt.world)
        if rt.rank == 0:
            mean_us = elapsed / spec.iters * 1e6
            rows.append(BenchRow(spec.kind.value, size, spec.iters, mean_us,
                                 size * spec.iters / elapsed / MIB))
    return rows


def apply_baseline(rows: list[BenchRow], baseline_csv: str):
    """ratio = log10(baseline_mean / measured_mean), matched by kind+size."""
    table = {}
    for line in baseline_csv.strip().splitlines():
        if line.startswith("kind,") or not line.strip():
            continue
        parts = line.split(",")
        table[(parts[0], int(parts[1]))] = float(parts[3])
    for row in rows:
        base = table.get((row.kind, row.size_bytes))
        if base is not None and row.mean_us > 0:
            row.ratio = math.log10(base / row.mean_us)


def to_csv(rows: list[BenchRow], with_ratio: bool = False) -> str:
    header = CSV_HEADER + (",log10_ratio" if with_ratio else "")
    return "\n".join([header] + [r.csv() for r in rows]) + "\n"
