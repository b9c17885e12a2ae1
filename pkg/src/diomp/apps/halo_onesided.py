"""One-sided halo exchange for the x-decomposed wave field.

Each interior rank deposits its two boundary slabs of width `halo` directly
into the neighbors' ghost planes with device-to-device puts, then fences.
The closing group barrier makes the neighbors' symmetric deposits visible
before anyone computes.
"""

from ..global_memory import GlobalAddress, TransferKind


def exchange(rt, group, u_addr, plane_bytes, halo, nx_local, rank, nranks):
    slab = halo * plane_bytes
    dev = u_addr.device
    if rank != 0:
        src = GlobalAddress(rank, dev, u_addr.offset + halo * plane_bytes)
        dst = GlobalAddress(rank - 1, dev,
                            u_addr.offset + (halo + nx_local) * plane_bytes)
        rt.put(dst, src, slab, TransferKind.D2D)
    if rank != nranks - 1:
        src = GlobalAddress(rank, dev, u_addr.offset + nx_local * plane_bytes)
        dst = GlobalAddress(rank + 1, dev, u_addr.offset)
        rt.put(dst, src, slab, TransferKind.D2D)
    rt.fence(group)
    rt.barrier(group)
