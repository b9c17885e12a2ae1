"""Acoustic isotropic wave propagation with one-sided halo exchange.

Second-order time stepping, order-2R space (R=4 by default), constant
velocity 1500 m/s, unit grid spacing, dt at half the CFL limit, zero
exterior (the R-wide padding on every global face is never written), and a
constant-amplitude point source injected at the global grid center each
step. The domain decomposes into equal x-slabs, one per rank; fields are
symmetric allocations so halo slabs move as plain device-to-device puts.

The per-point arithmetic order is fixed (x, y, z taps in ascending tap
order), so the field after T steps is bitwise identical for any rank count.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import DecompositionError
from ..global_memory import GlobalAddress, TransferKind
from ..runtime import Runtime
from . import halo_onesided, halo_twosided

VELOCITY = 1500.0
# order-8 central second-derivative coefficients, unit spacing
_COEF = (-205.0 / 72.0, 8.0 / 5.0, -1.0 / 5.0, 8.0 / 315.0, -1.0 / 560.0)


@dataclass(frozen=True)
class StencilSpec:
    nx: int
    ny: int
    nz: int
    steps: int
    radius: int = 4
    source_amplitude: float = 1.0

    def __post_init__(self):
        if self.radius != len(_COEF) - 1:
            raise DecompositionError("only radius 4 coefficients are built in")


@dataclass
class StencilResult:
    checksum: str
    field: np.ndarray | None     # assembled (nx, ny, nz) at rank 0
    seconds: float


def rank_xmin_xmax(r: int, nranks: int, nx: int) -> tuple[int, int]:
    """Contiguous block decomposition of [0, nx); blocks tile exactly."""
    if not 0 <= r < nranks <= nx:
        raise DecompositionError(f"rank {r} of {nranks} over nx={nx}")
    return (r * nx) // nranks, ((r + 1) * nx) // nranks - 1


def _time_params(radius: int) -> tuple[float, np.ndarray]:
    # dt = 0.5 * CFL limit for the explicit leapfrog scheme
    per_axis = abs(_COEF[0]) + 2 * sum(abs(c) for c in _COEF[1:radius + 1])
    dt = 0.5 * 2.0 / (VELOCITY * math.sqrt(3.0 * per_axis))
    scale = (VELOCITY * dt) ** 2
    w = np.array(_COEF[:radius + 1]) * scale
    return dt, w


def run_stencil(rt: Runtime, spec: StencilSpec, exchange: str = "onesided",
                gather: bool = True) -> StencilResult:
    import time as _time

    nranks = rt.nranks
    r = spec.radius
    if spec.nx % nranks:
        raise DecompositionError(f"nx={spec.nx} not divisible by {nranks} ranks")
    nxl = spec.nx // nranks
    if nxl < r:
        raise DecompositionError(f"local slab {nxl} thinner than radius {r}")

    shape = (nxl + 2 * r, spec.ny + 2 * r, spec.nz + 2 * r)
    nbytes = int(np.prod(shape)) * 8
    plane_bytes = shape[1] * shape[2] * 8
    field_a = rt.alloc_symmetric(nbytes, 0)
    field_b = rt.alloc_symmetric(nbytes, 0)
    slab_bytes = r * plane_bytes
    mailbox = rt.alloc_symmetric(2 * slab_bytes + 16, 0) \
        if exchange == "twosided" else None

    def view(rec):
        return rt.gm.arena(0)[rec.addr.offset:rec.addr.offset + nbytes] \
            .view("<f8").reshape(shape)

    arrays = {field_a.addr.offset: view(field_a),
              field_b.addr.offset: view(field_b)}
    for arr in arrays.values():
        arr[:] = 0.0
    if mailbox is not None:
        rt.gm.arena(0)[mailbox.addr.offset:mailbox.addr.offset
                       + 2 * slab_bytes + 16] = 0

    _, w = _time_params(r)
    center = 3.0 * w[0]
    gxmin, gxmax = rank_xmin_xmax(rt.rank, nranks, spec.nx)
    cx, cy, cz = spec.nx // 2, spec.ny // 2, spec.nz // 2
    own_source = gxmin <= cx <= gxmax
    src_idx = (cx - gxmin + r, cy + r, cz + r)

    prev_rec, cur_rec = field_a, field_b
    rt.barrier(rt.world)
    t0 = _time.perf_counter()
    for step in range(spec.steps):
        if nranks > 1:
            if exchange == "onesided":
                halo_onesided.exchange(rt, rt.world, cur_rec.addr, plane_bytes,
                                       r, nxl, rt.rank, nranks)
            else:
                halo_twosided.exchange(rt, rt.world, cur_rec.addr, mailbox.addr,
                                       plane_bytes, r, nxl, rt.rank, nranks, step)
        u_prev = arrays[prev_rec.addr.offset]
        u_cur = arrays[cur_rec.addr.offset]
        kernels.stencil_update(u_prev, u_cur, u_prev, center, w, w, w, r)
        if own_source and spec.source_amplitude:
            u_prev[src_idx] += spec.source_amplitude
        prev_rec, cur_rec = cur_rec, prev_rec
    rt.barrier(rt.world)
    seconds = _time.perf_counter() - t0

    if not gather:
        return StencilResult("", None, seconds)
    field = _gather_field(rt, cur_rec, arrays[cur_rec.addr.offset], spec, nxl)
    checksum = ""
    if rt.rank == 0:
        checksum = hashlib.sha256(dump_bytes(field)).hexdigest()
    return StencilResult(checksum, field, seconds)


def _gather_field(rt: Runtime, cur_rec, local: np.ndarray,
                  spec: StencilSpec, nxl: int) -> np.ndarray | None:
    r = spec.radius
    interior = (slice(r, r + nxl), slice(r, r + spec.ny), slice(r, r + spec.nz))
    if rt.rank != 0:
        rt.barrier(rt.world)
        return None
    field = np.empty((spec.nx, spec.ny, spec.nz))
    field[0:nxl] = local[interior]
    nbytes = local.nbytes
    for peer in range(1, rt.nranks):
        buf = np.empty(local.shape)
        rt.get(GlobalAddress(peer, 0, cur_rec.addr.offset), buf, nbytes,
               TransferKind.D2H).wait(rt.cfg.timeout)
        gxmin, _ = rank_xmin_xmax(peer, rt.nranks, spec.nx)
        field[gxmin:gxmin + nxl] = buf[interior]
    rt.barrier(rt.world)
    return field


def dump_bytes(field: np.ndarray) -> bytes:
    """Serialization used by --dump-field: f64, x-fastest, little-endian."""
    return field.transpose(2, 1, 0).astype("<f8", copy=False).tobytes()
