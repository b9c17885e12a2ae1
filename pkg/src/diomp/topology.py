"""Endpoint topology and hierarchical path classification.

Endpoints are (rank, device) pairs; the launcher assigns each rank a node
id, which is what turns single-host process sets into simulated multi-node
layouts. Every pair of endpoints falls into exactly one of four path kinds,
from cheapest to most expensive:

    IntraProcess   same process, no peer fabric (includes self-pairs)
    PeerFabric     same process, peer-capable device pair (direct fabric)
    IntraNodeIPC   same node, different processes (shared-memory rings)
    InterNode      different nodes (socket transport, or shm fallback)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import UnknownEndpoint


class PathKind(enum.Enum):
    IntraProcess = "intra_process"
    PeerFabric = "peer_fabric"
    IntraNodeIPC = "intra_node_ipc"
    InterNode = "inter_node"


@dataclass(frozen=True, order=True)
class Endpoint:
    rank: int
    device: int
    node_id: int = 0

    def key(self) -> tuple[int, int]:
        return (self.rank, self.device)


@dataclass(frozen=True)
class TopologyMap:
    """Identical on every rank after discovery.

    node_ids[r] / process_ids[r] describe rank r; peer_matrix[(d1, d2)] says
    whether devices d1 and d2 of one process enjoy a direct peer fabric.
    """

    nranks: int
    devices_per_rank: int
    node_ids: tuple[int, ...]
    process_ids: tuple[int, ...]
    peer_matrix: dict[tuple[int, int], bool]

    def endpoint(self, rank: int, device: int) -> Endpoint:
        if not (0 <= rank < self.nranks and 0 <= device < self.devices_per_rank):
            raise UnknownEndpoint(f"(rank={rank}, device={device})")
        return Endpoint(rank, device, self.node_ids[rank])

    def endpoints(self) -> list[Endpoint]:
        return [self.endpoint(r, d)
                for r in range(self.nranks)
                for d in range(self.devices_per_rank)]

    def digest_bytes(self) -> bytes:
        peer = sorted(self.peer_matrix.items())
        return repr((self.nranks, self.devices_per_rank, self.node_ids,
                     self.process_ids, peer)).encode()


def full_peer_matrix(devices: int) -> dict[tuple[int, int], bool]:
    """Every distinct device pair peer-capable; self-pairs are not."""
    return {(a, b): a != b for a in range(devices) for b in range(devices)}


def empty_peer_matrix(devices: int) -> dict[tuple[int, int], bool]:
    return {(a, b): False for a in range(devices) for b in range(devices)}


def classify_path(a: Endpoint, b: Endpoint, topo: TopologyMap) -> PathKind:
    """Pure, total and symmetric over the topology's endpoints."""
    for ep in (a, b):
        if not (0 <= ep.rank < topo.nranks and 0 <= ep.device < topo.devices_per_rank):
            raise UnknownEndpoint(str(ep))
    if a.rank == b.rank:
        if topo.peer_matrix.get((a.device, b.device), False):
            return PathKind.PeerFabric
        return PathKind.IntraProcess
    if topo.node_ids[a.rank] == topo.node_ids[b.rank]:
        return PathKind.IntraNodeIPC
    return PathKind.InterNode
