"""Exception hierarchy for the runtime.

Every error the runtime raises derives from DiompError so callers can catch
the whole family. Remote failures detected by a peer's progress engine come
back as wire status codes and are re-raised locally as the matching type.
"""


class DiompError(Exception):
    """Base class for all runtime errors."""


# -- memory / allocation ------------------------------------------------

class AllocationFailure(DiompError):
    """The host could not reserve a segment arena."""


class ConfigMismatch(DiompError):
    """Ranks disagreed on runtime configuration at the init handshake."""


class OutOfSegment(DiompError):
    """The allocator cannot satisfy the request."""


class CollectiveMismatch(DiompError):
    """Ranks disagreed on the arguments of a collective call."""


class DoubleFree(DiompError):
    pass


class InvalidAddress(DiompError):
    """RMA touched bytes outside any live allocation."""


class NotSymmetric(DiompError):
    """Address translation requires a symmetric allocation."""


class StaleCell(DiompError):
    """Indirection cell generation no longer matches (freed or rebound)."""


class NullPayload(DiompError):
    """Indirection cell is bound to a zero-byte payload."""


class StreamMismatch(DiompError):
    """Transfer touched a stream-associated block from the wrong stream."""


# -- transport ----------------------------------------------------------

class UnknownEndpoint(DiompError):
    pass


class HandshakeTimeout(DiompError):
    pass


class TransportFailure(DiompError):
    """A peer connection died or the transport is shut down."""


class KindMismatch(DiompError):
    """TransferKind incompatible with the supplied buffers/addresses."""


class BadMagic(DiompError):
    pass


class BadVersion(DiompError):
    pass


class TruncatedFrame(DiompError):
    pass


# -- streams ------------------------------------------------------------

class StreamClosed(DiompError):
    """Task submitted to a stream that is not active."""


# -- groups / collectives ------------------------------------------------

class StaleGroup(DiompError):
    """Operation on a freed group handle."""


class PeerFailure(DiompError):
    """A group member died or never arrived at a synchronization point."""


class RootOutOfRange(DiompError):
    pass


class TypeMismatch(DiompError):
    """Reduction buffers disagree with the declared element type."""


# -- apps ---------------------------------------------------------------

class ShapeMismatch(DiompError):
    pass


class DecompositionError(DiompError):
    """Domain decomposition produced a slab thinner than the stencil radius."""


# -- launcher -----------------------------------------------------------

class UsageError(DiompError):
    """Bad command line; maps to exit code 2."""


class SpawnFailure(DiompError):
    pass


class ChildCrash(DiompError):
    """A launched rank exited nonzero; carries the first bad status."""

    def __init__(self, message: str, status: int = 1):
        super().__init__(message)
        self.status = status
