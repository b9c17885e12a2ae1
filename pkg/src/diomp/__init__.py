"""PGAS-style one-sided communication runtime over simulated devices.

Public surface: init()/finalize() plus the Runtime handle's methods for
allocation (alloc_symmetric / alloc_asymmetric / free), addressing
(translate / resolve_cell), RMA (put / get / fence), synchronization
(barrier, groups) and the collectives module (bootstrap / bcast / reduce /
allreduce / device_bcast).
"""

from . import collectives, kernels
from .collectives import (Communicator, ElementType, ReduceKind, ReduceOp,
                          UniqueId, allreduce, bcast, bootstrap, device_bcast,
                          reduce)
from .config import LaunchConfig, ResolvedConfig, resolve_from_env
from .errors import *  # noqa: F401,F403 -- the error module defines the taxonomy
from .global_memory import (AllocatorKind, AllocMode, AllocRecord, GlobalAddress,
                            GlobalMemory, IndirectionCell, Segment, SegmentConfig,
                            TransferKind, segment_create)
from .runtime import Group, Runtime, StreamedHandle, init, finalize
from .streams import Stream, StreamEvent, StreamPool
from .topology import Endpoint, PathKind, TopologyMap, classify_path
from .transport import CompletionHandle, HandleState, TransportEngine
from .wire import Opcode, Status, WireMessage, decode, encode

__version__ = "0.1.0"
