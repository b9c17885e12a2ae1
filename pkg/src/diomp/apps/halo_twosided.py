"""Emulated two-sided halo exchange (send/recv style) for comparison.

Mimics the message-passing structure: explicit sends into per-direction
mailboxes on the receiver, matching receives that wait for delivery tags,
a wait-all, and an unpack copy from the mailboxes into the ghost planes.
Functionally equivalent to the one-sided variant; exists to compare the
code complexity of the two styles.
"""

import struct

from ..global_memory import GlobalAddress, TransferKind

_FROM_LEFT, _FROM_RIGHT = 0, 1


def exchange(rt, group, u_addr, mail_addr, plane_bytes, halo, nx_local,
             rank, nranks, step):
    slab = halo * plane_bytes
    dev = u_addr.device
    tag = struct.pack("<q", step + 1)
    flags_off = mail_addr.offset + 2 * slab
    sends = []
    # post sends: my boundary slabs into the neighbors' mailboxes
    if rank != 0:
        payload = GlobalAddress(rank, dev, u_addr.offset + halo * plane_bytes)
        box = GlobalAddress(rank - 1, dev, mail_addr.offset + _FROM_RIGHT * slab)
        sends.append((rt.put(box, payload, slab, TransferKind.D2D),
                      GlobalAddress(rank - 1, dev, flags_off + _FROM_RIGHT * 8)))
    if rank != nranks - 1:
        payload = GlobalAddress(rank, dev, u_addr.offset + nx_local * plane_bytes)
        box = GlobalAddress(rank + 1, dev, mail_addr.offset + _FROM_LEFT * slab)
        sends.append((rt.put(box, payload, slab, TransferKind.D2D),
                      GlobalAddress(rank + 1, dev, flags_off + _FROM_LEFT * 8)))
    # complete the data sends, then raise the matching delivery tags
    for handle, flag in sends:
        handle.wait(rt.cfg.timeout)
        rt.put(flag, tag, 8, TransferKind.H2D).wait(rt.cfg.timeout)
    # matching receives: wait for the tags, unpack mailbox -> ghost planes
    arena = rt.gm.arena(dev)
    if rank != 0:
        _wait_tag(rt, dev, flags_off + _FROM_LEFT * 8, tag)
        src = mail_addr.offset + _FROM_LEFT * slab
        arena[u_addr.offset:u_addr.offset + slab] = arena[src:src + slab]
    if rank != nranks - 1:
        _wait_tag(rt, dev, flags_off + _FROM_RIGHT * 8, tag)
        src = mail_addr.offset + _FROM_RIGHT * slab
        ghost = u_addr.offset + (halo + nx_local) * plane_bytes
        arena[ghost:ghost + slab] = arena[src:src + slab]
    rt.barrier(group)


def _wait_tag(rt, device, offset, tag):
    rt.engine.wait_until(lambda: bytes(rt.gm.view(device, offset, 8)) == tag,
                         rt.cfg.timeout, "halo mailbox tag")
