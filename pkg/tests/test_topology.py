import pytest

from diomp.emulate import run_emulated
from diomp.errors import UnknownEndpoint
from diomp.topology import (Endpoint, PathKind, TopologyMap, classify_path,
                            empty_peer_matrix, full_peer_matrix)


def _topo(nranks=4, devices=2, nodes=(0, 0, 1, 1), peer="full"):
    matrix = full_peer_matrix(devices) if peer == "full" else \
        empty_peer_matrix(devices)
    return TopologyMap(nranks, devices, tuple(nodes),
                       tuple(100 + r for r in range(nranks)), matrix)


def test_classification_examples():
    topo = _topo()
    e = topo.endpoint
    assert classify_path(e(0, 0), e(0, 1), topo) == PathKind.PeerFabric
    assert classify_path(e(0, 0), e(0, 0), topo) == PathKind.IntraProcess
    assert classify_path(e(0, 0), e(2, 0), topo) == PathKind.InterNode
    assert classify_path(e(0, 0), e(1, 1), topo) == PathKind.IntraNodeIPC


def test_peer_matrix_disabled_collapses_to_intra_process():
    topo = _topo(peer="none")
    e = topo.endpoint
    assert classify_path(e(0, 0), e(0, 1), topo) == PathKind.IntraProcess


def test_classification_total_and_symmetric():
    topo = _topo()
    eps = topo.endpoints()
    assert len(eps) == 8
    for a in eps:
        for b in eps:
            kind = classify_path(a, b, topo)
            assert kind in PathKind
            assert kind == classify_path(b, a, topo)


def test_unknown_endpoint_rejected():
    topo = _topo()
    with pytest.raises(UnknownEndpoint):
        topo.endpoint(4, 0)
    with pytest.raises(UnknownEndpoint):
        classify_path(Endpoint(0, 0, 0), Endpoint(0, 9, 0), topo)


def test_single_rank_full_peer_matrix_echo():
    topo = _topo(nranks=1, devices=4, nodes=(0,))
    for a in range(4):
        for b in range(4):
            assert topo.peer_matrix[(a, b)] == (a != b)


def test_discovery_maps_identical_across_ranks():
    def fn(rt):
        return rt.topology.digest_bytes()

    digests = run_emulated(4, fn, node_ids=[0, 0, 1, 1],
                           segment_bytes=2 * 1024 * 1024)
    assert len(set(digests)) == 1


def test_world_endpoints_single_process_multi_device():
    def fn(rt):
        return [(ep.rank, ep.device) for ep in rt.world.members]

    members = run_emulated(1, fn, devices_per_rank=4,
                           segment_bytes=2 * 1024 * 1024)[0]
    assert members == [(0, d) for d in range(4)]
