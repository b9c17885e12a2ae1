"""Wire protocol: fixed 40-byte little-endian header plus raw payload.

Header layout (40 bytes):

    magic     4s   b"DOMP"
    version   u8   currently 1
    opcode    u8
    msg_id    u64  initiator-scoped id, echoed by responses
    src_rank  u32
    dst_rank  u32
    device    u16  target device index
    offset    u64  target byte offset; responses reuse it as a status code
    length    u64  payload bytes that follow (<= 64 MiB per fragment)

Transfers larger than the fragment cap are split into independent
offset-adjusted fragments by the transport and reassemble transparently.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .errors import BadMagic, BadVersion, TruncatedFrame

MAGIC = b"DOMP"
VERSION = 1
HEADER_LEN = 40
MAX_FRAGMENT = 64 * 1024 * 1024

_HEADER = struct.Struct("<4sBBQIIHQQ")
assert _HEADER.size == HEADER_LEN


class Opcode(enum.IntEnum):
    PUT = 1
    GET_REQ = 2
    GET_RESP = 3
    CELL_FETCH = 4
    BARRIER = 5
    BOOTSTRAP = 6
    ACK = 7


class Status(enum.IntEnum):
    """Status codes carried in the offset field of ACK / GET_RESP frames."""

    OK = 0
    INVALID_ADDRESS = 1
    BAD_REQUEST = 2
    INTERNAL = 3


@dataclass
class WireMessage:
    opcode: Opcode
    msg_id: int
    src_rank: int
    dst_rank: int
    device: int = 0
    offset: int = 0
    payload: bytes = field(default=b"")

    @property
    def length(self) -> int:
        return len(self.payload)


def encode_header(opcode: int, msg_id: int, src_rank: int, dst_rank: int,
                  device: int, offset: int, length: int) -> bytes:
    if length > MAX_FRAGMENT:
        raise ValueError(f"fragment of {length} bytes exceeds the {MAX_FRAGMENT} cap")
    return _HEADER.pack(MAGIC, VERSION, opcode, msg_id, src_rank, dst_rank,
                        device, offset, length)


def encode(msg: WireMessage) -> bytes:
    """Serialize a full frame (header + payload) to bytes."""
    return encode_header(msg.opcode, msg.msg_id, msg.src_rank, msg.dst_rank,
                         msg.device, msg.offset, len(msg.payload)) + bytes(msg.payload)


def decode_header(buf) -> tuple[Opcode, int, int, int, int, int, int]:
    """Parse a 40-byte header; returns (opcode, msg_id, src, dst, device, offset, length)."""
    if len(buf) < HEADER_LEN:
        raise TruncatedFrame(f"need {HEADER_LEN} header bytes, have {len(buf)}")
    magic, version, opcode, msg_id, src, dst, device, offset, length = \
        _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if length > MAX_FRAGMENT:
        raise TruncatedFrame(f"declared length {length} exceeds fragment cap")
    return Opcode(opcode), msg_id, src, dst, device, offset, length


def decode(buf) -> WireMessage:
    """Parse one full frame from buf; buf must hold the entire frame."""
    opcode, msg_id, src, dst, device, offset, length = decode_header(buf)
    if len(buf) < HEADER_LEN + length:
        raise TruncatedFrame(f"frame declares {length} payload bytes, "
                             f"buffer holds {len(buf) - HEADER_LEN}")
    payload = bytes(buf[HEADER_LEN:HEADER_LEN + length])
    return WireMessage(opcode, msg_id, src, dst, device, offset, payload)
