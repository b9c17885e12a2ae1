"""Launch-time configuration.

LaunchConfig is what callers hand to init(); ResolvedConfig is the fully
resolved per-process view (rank identity, rendezvous address, tuning knobs)
assembled from the launcher's environment plus overrides. The in-process
emulation used by the selftest builds ResolvedConfig directly.

Environment variables (all optional unless set by the launcher):

    DIOMP_RANK / DIOMP_NRANKS / DIOMP_NODE_ID   rank identity
    DIOMP_RENDEZVOUS           host:port of rank 0's rendezvous socket
    DIOMP_SESSION              token naming shared-memory regions
    DIOMP_SEGMENT_BYTES        per-device arena size (default 64 MiB)
    DIOMP_ALLOCATOR            linear | buddy (default buddy)
    DIOMP_DEVICES_PER_RANK     default 1
    DIOMP_TRANSPORT            tcp | shm  (InterNode fallback; default tcp)
    DIOMP_PEER_MATRIX          full | none (simulated peer fabric; default full)
    DIOMP_MAX_ACTIVE_STREAMS   stream pool bound (default 8)
    DIOMP_SIM_TASK_US          artificial per-task latency (default 0)
    DIOMP_TIMEOUT              handshake/progress timeout seconds (default 60)
    DIOMP_SHM_RING_BYTES       SPSC ring size (default 2 MiB)
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

from .errors import ConfigMismatch
from .global_memory import DEFAULT_SEGMENT_BYTES, AllocatorKind, SegmentConfig


@dataclass
class LaunchConfig:
    nranks: int = 1
    devices_per_rank: int = 1
    node_ids: list[int] | None = None
    segment: SegmentConfig | None = None
    transport: str | None = None

    def __post_init__(self):
        if self.nranks < 1 or self.devices_per_rank < 1:
            raise ValueError("nranks and devices_per_rank must be >= 1")
        if self.node_ids is not None and len(self.node_ids) != self.nranks:
            raise ValueError("node assignment list length must equal nranks")


@dataclass
class ResolvedConfig:
    rank: int
    nranks: int
    devices_per_rank: int
    node_id: int
    segment: SegmentConfig
    transport: str = "tcp"
    peer_mode: str = "full"
    rendezvous: tuple[str, int] = ("127.0.0.1", 29400)
    listen_host: str = "127.0.0.1"
    session: str = ""
    timeout: float = 60.0
    max_active_streams: int | None = None
    sim_task_us: int | None = None
    shm_dir: str = "/dev/shm"
    shm_ring_bytes: int = 2 * 1024 * 1024
    process_tag: int = field(default_factory=os.getpid)

    def digest(self) -> bytes:
        """Rank-invariant configuration fingerprint checked at the handshake."""
        text = (f"{self.nranks}:{self.devices_per_rank}:"
                f"{self.segment.digest().decode()}:{self.transport}:{self.peer_mode}")
        return hashlib.sha256(text.encode()).digest()[:16]


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    return int(raw) if raw else default


def segment_config_from_env(overrides: SegmentConfig | None = None) -> SegmentConfig:
    if overrides is not None:
        return overrides
    kind_raw = os.environ.get("DIOMP_ALLOCATOR", "buddy").lower()
    try:
        kind = AllocatorKind(kind_raw)
    except ValueError:
        raise ConfigMismatch(f"DIOMP_ALLOCATOR={kind_raw!r} is not linear|buddy")
    return SegmentConfig(segment_bytes=_env_int("DIOMP_SEGMENT_BYTES",
                                                DEFAULT_SEGMENT_BYTES),
                         allocator_kind=kind)


def resolve_from_env(launch: LaunchConfig | None = None) -> ResolvedConfig:
    launch = launch or LaunchConfig(
        nranks=_env_int("DIOMP_NRANKS", 1),
        devices_per_rank=_env_int("DIOMP_DEVICES_PER_RANK", 1),
    )
    rank = _env_int("DIOMP_RANK", 0)
    node_id = launch.node_ids[rank] if launch.node_ids is not None else \
        _env_int("DIOMP_NODE_ID", 0)
    rdv = os.environ.get("DIOMP_RENDEZVOUS", "127.0.0.1:29400")
    host, _, port = rdv.rpartition(":")
    transport = (launch.transport or os.environ.get("DIOMP_TRANSPORT", "tcp")).lower()
    if transport not in ("tcp", "shm"):
        raise ConfigMismatch(f"DIOMP_TRANSPORT={transport!r} is not tcp|shm")
    peer_mode = os.environ.get("DIOMP_PEER_MATRIX", "full").lower()
    if peer_mode not in ("full", "none"):
        raise ConfigMismatch(f"DIOMP_PEER_MATRIX={peer_mode!r} is not full|none")
    sim_raw = os.environ.get("DIOMP_SIM_TASK_US")
    return ResolvedConfig(
        rank=rank,
        nranks=launch.nranks,
        devices_per_rank=launch.devices_per_rank,
        node_id=node_id,
        segment=segment_config_from_env(launch.segment),
        transport=transport,
        peer_mode=peer_mode,
        rendezvous=(host or "127.0.0.1", int(port)),
        session=os.environ.get("DIOMP_SESSION", ""),
        timeout=float(os.environ.get("DIOMP_TIMEOUT", "60")),
        max_active_streams=_env_int("DIOMP_MAX_ACTIVE_STREAMS", 0) or None,
        sim_task_us=int(sim_raw) if sim_raw else None,
        shm_ring_bytes=_env_int("DIOMP_SHM_RING_BYTES", 2 * 1024 * 1024),
    )
