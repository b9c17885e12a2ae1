"""Ring-exchange distributed matrix multiply (C = A x B) with overlap.

Row-stripe layout over P device endpoints: endpoint e owns the A and C row
stripes of width Ns = N/P and starts holding B stripe e. Each of the P
steps multiplies the held B stripe into C while the next stripe is
prefetched into a spare buffer through a stream-submitted put (ring
exchange toward the predecessor); only then comes the fence and the buffer
swap, so communication rides under the N*Ns*Ns block product.

The residual is measured against the fixed-order triple-loop kernel run on
the full matrices.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import ShapeMismatch
from ..global_memory import GlobalAddress, TransferKind
from ..runtime import Runtime


@dataclass(frozen=True)
class MatmulSpec:
    n: int
    p: int

    @property
    def ns(self) -> int:
        return self.n // self.p

    def __post_init__(self):
        if self.p < 1 or self.n < 1 or self.n % self.p:
            raise ShapeMismatch(f"P={self.p} must divide N={self.n}")


@dataclass
class CannonResult:
    residual: float
    seconds: float
    identity_exact: bool | None
    # (endpoint, step, kind, t_start, t_end); kind in {"compute", "xfer"}
    timeline: list[tuple[int, int, str, float, float]] = field(default_factory=list)

    def overlap_observed(self) -> bool:
        """True if some prefetch interval overlaps the same step's compute."""
        spans = {}
        for ep, step, kind, t0, t1 in self.timeline:
            spans.setdefault((ep, step), {})[kind] = (t0, t1)
        for pair in spans.values():
            if "compute" in pair and "xfer" in pair:
                c0, c1 = pair["compute"]
                x0, x1 = pair["xfer"]
                if max(c0, x0) < min(c1, x1):
                    return True
        return False


def _pack_result(residual: float, exact: bool) -> bytes:
    return struct.pack("<dB", residual, int(exact))


def _unpack_result(blob: bytes) -> tuple[float, bool]:
    residual, exact = struct.unpack("<dB", blob)
    return residual, bool(exact)


def _fill_matrices(n: int, seed: int, identity_b: bool):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, 1.0, (n, n))
    b = np.eye(n) if identity_b else rng.uniform(-1.0, 1.0, (n, n))
    return a, b


def cannon_matmul(rt: Runtime, spec: MatmulSpec, seed: int = 0,
                  identity_b: bool = False, use_streams: bool = True) -> CannonResult:
    p = spec.p
    dpr = rt.cfg.devices_per_rank
    if p != rt.nranks * dpr:
        raise ShapeMismatch(f"P={p} but the world has {rt.nranks * dpr} endpoints")
    n, ns = spec.n, spec.ns
    stripe_bytes = ns * n * 8

    a_full, b_full = _fill_matrices(n, seed, identity_b)

    # Every device gets the same-offset buffer pair; records are bound to a
    # stream so transfers must flow through it.
    streams = [rt.pools[d].acquire() for d in range(dpr)] if use_streams \
        else [None] * dpr
    bufs = []
    for d in range(dpr):
        cur = rt.alloc_symmetric(stripe_bytes, d, stream=streams[d])
        spare = rt.alloc_symmetric(stripe_bytes, d, stream=streams[d])
        bufs.append([cur, spare])

    world = rt.world.members
    my_eps = [(i, ep) for i, ep in enumerate(world) if ep.rank == rt.rank]
    arena = rt.gm.arena

    def stripe_view(d, rec):
        off = rec.addr.offset
        return arena(d)[off:off + stripe_bytes].view("<f8").reshape(ns, n)

    locals_ = {}
    for e, ep in my_eps:
        d = ep.device
        stripe_view(d, bufs[d][0])[:] = b_full[e * ns:(e + 1) * ns]
        locals_[e] = dict(a=a_full[e * ns:(e + 1) * ns].copy(),
                          c=np.zeros((ns, n)), dev=d)
    rt.barrier(rt.world)

    timeline = []
    t_begin = time.perf_counter()
    for step in range(p):
        handles = []
        for e, ep in my_eps:
            d = ep.device
            cur, spare = bufs[d][step % 2], bufs[d][(step + 1) % 2]
            if p > 1:
                pred = world[(e - 1) % p]
                dst = GlobalAddress(pred.rank, pred.device, spare.addr.offset)
                # submit on the destination block's associated stream
                h = rt.put(dst, GlobalAddress(rt.rank, d, cur.addr.offset),
                           stripe_bytes, TransferKind.D2D,
                           stream=streams[pred.device])
                handles.append((e, step, h, time.perf_counter()))
        for e, ep in my_eps:
            d = ep.device
            cur = bufs[d][step % 2]
            s = (e + step) % p
            st = locals_[e]
            c0 = time.perf_counter()
            st["c"] += st["a"][:, s * ns:(s + 1) * ns] @ stripe_view(d, cur)
            timeline.append((e, step, "compute", c0, time.perf_counter()))
        rt.fence(rt.world)
        for e, step_, h, t_sub in handles:
            inner = getattr(h, "inner", h)
            timeline.append((e, step_, "xfer", t_sub,
                             inner.completed_at or time.perf_counter()))
        rt.barrier(rt.world)
    seconds = time.perf_counter() - t_begin

    # Residual against the fixed-order triple-loop oracle on full matrices.
    oracle = np.zeros((n, n))
    kernels.matmul_f64(a_full, b_full, oracle)
    residual = 0.0
    exact = True
    for e, ep in my_eps:
        st = locals_[e]
        diff = np.abs(st["c"] - oracle[e * ns:(e + 1) * ns])
        residual = max(residual, float(diff.max()) if diff.size else 0.0)
        if identity_b:
            exact = exact and np.array_equal(st["c"], a_full[e * ns:(e + 1) * ns])
    seq = rt._per_group_seq[("app", "cannon")]
    rt._per_group_seq[("app", "cannon")] += 1
    gathered = rt._ctrl_allgather(tuple(range(rt.nranks)),
                                  b"cannon:res:%d" % seq,
                                  _pack_result(residual, exact))
    residual = max(_unpack_result(b)[0] for _, b in gathered)
    exact = all(_unpack_result(b)[1] for _, b in gathered)

    for d, s in enumerate(streams):
        if s is not None:
            rt.pools[d].release(s)
    return CannonResult(residual, seconds, exact if identity_b else None, timeline)
