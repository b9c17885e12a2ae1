"""In-process multi-rank emulation.

Runs one Runtime per thread, wired through the normal transports (loopback
TCP mesh, plus shared-memory rings when ranks share a node id). This is the
"emulated ranks" mode the selftest uses; real deployments use one process
per rank via the launcher. The public init() singleton does not apply here:
each thread owns its Runtime explicitly.
"""

from __future__ import annotations

import secrets
import socket
import threading
import traceback

from .config import ResolvedConfig
from .global_memory import AllocatorKind, SegmentConfig
from .runtime import Runtime


class EmulatedRankError(Exception):
    def __init__(self, failures: dict[int, str]):
        self.failures = failures
        super().__init__("emulated ranks failed:\n" +
                         "\n".join(f"-- rank {r} --\n{tb}" for r, tb in
                                   sorted(failures.items())))


def free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def run_emulated(nranks: int, fn, *, devices_per_rank: int = 1,
                 node_ids: list[int] | None = None, transport: str = "tcp",
                 segment_bytes: int = 8 * 1024 * 1024,
                 allocator: AllocatorKind = AllocatorKind.Buddy,
                 peer_mode: str = "full", timeout: float = 30.0,
                 max_active_streams: int | None = None,
                 sim_task_us: int | None = None) -> list:
    """Run fn(rt) on every emulated rank; returns results in rank order."""
    node_ids = node_ids or list(range(nranks))
    port = free_port()
    session = "emu" + secrets.token_hex(6)
    seg = SegmentConfig(segment_bytes=segment_bytes, allocator_kind=allocator)
    results: list = [None] * nranks
    failures: dict[int, str] = {}

    def worker(rank: int):
        rt = None
        try:
            cfg = ResolvedConfig(
                rank=rank, nranks=nranks, devices_per_rank=devices_per_rank,
                node_id=node_ids[rank], segment=seg, transport=transport,
                peer_mode=peer_mode, rendezvous=("127.0.0.1", port),
                session=session, timeout=timeout,
                max_active_streams=max_active_streams, sim_task_us=sim_task_us,
                process_tag=rank)
            rt = Runtime(cfg)
            results[rank] = fn(rt)
        except Exception:
            failures[rank] = traceback.format_exc()
        finally:
            if rt is not None:
                try:
                    rt.finalize()
                except Exception:
                    failures.setdefault(rank, traceback.format_exc())

    threads = [threading.Thread(target=worker, args=(r,), name=f"emu-rank-{r}")
               for r in range(nranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=timeout + 30)
    stuck = [t for t in threads if t.is_alive()]
    if stuck:
        raise EmulatedRankError({int(t.name.rsplit("-", 1)[1]): "thread stuck"
                                 for t in stuck} | failures)
    if failures:
        raise EmulatedRankError(failures)
    return results
