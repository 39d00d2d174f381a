"""Length-prefixed frame codec shared by the task queue and the worker boundary.

Wire layout, identical on both boundaries:

    u32 big-endian length | kind byte | 16-byte UUID | body

where length counts everything after the prefix (kind + uuid + body) and the
body is canonical JSON bytes, possibly empty. The two boundaries differ only
in their kind vocabulary.
"""

from __future__ import annotations

import asyncio
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Type
from uuid import UUID, uuid4

from servehub.domain import ServeHubError, canonical_json, parse_canonical

__all__ = [
    "ProtocolError",
    "NeedMoreBytes",
    "QueueKind",
    "WorkerKind",
    "Frame",
    "DEFAULT_FRAME_CAP",
    "HEADER_LEN",
    "encode_frame",
    "decode_frame",
    "FrameReader",
    "read_frame",
    "write_frame",
]

DEFAULT_FRAME_CAP = 64 * 1024 * 1024
# kind byte + uuid, the part of the payload every frame must carry
FIXED_LEN = 1 + 16
HEADER_LEN = 4


class ProtocolError(ServeHubError):
    """Malformed or oversized frame; the connection must be closed."""


class NeedMoreBytes(Exception):
    """Decode ran out of input; ``missing`` more bytes are required."""

    def __init__(self, missing: int):
        super().__init__(f"need {missing} more bytes")
        self.missing = missing


class QueueKind(IntEnum):
    """Frames between the Management Service and Task Managers."""

    REGISTER = 0
    REGISTER_ACK = 1
    TASK = 2
    RESULT = 3
    HEARTBEAT = 4
    SHUTDOWN = 5


class WorkerKind(IntEnum):
    """Frames between the process executor and a worker process."""

    PING = 0
    PONG = 1
    INVOKE = 2
    INVOKE_BATCH = 3
    OUTPUT = 4
    ERROR = 5
    SHUTDOWN = 6


@dataclass(frozen=True)
class Frame:
    kind: IntEnum
    correlation_id: UUID = field(default_factory=uuid4)
    body: bytes = b""

    def payload(self) -> Any:
        """Decode the JSON body; empty bodies decode to None."""
        if not self.body:
            return None
        return parse_canonical(self.body)

    @classmethod
    def with_payload(cls, kind: IntEnum, payload: Any, correlation_id: UUID | None = None) -> "Frame":
        body = b"" if payload is None else canonical_json(payload)
        return cls(kind, correlation_id or uuid4(), body)


def encode_frame(frame: Frame, cap: int = DEFAULT_FRAME_CAP) -> bytes:
    length = FIXED_LEN + len(frame.body)
    if length > cap:
        raise ProtocolError(f"frame length {length} exceeds cap {cap}")
    return struct.pack(">IB", length, int(frame.kind)) + frame.correlation_id.bytes + frame.body


def decode_frame(
    data: bytes | bytearray | memoryview,
    kinds: Type[IntEnum] = QueueKind,
    cap: int = DEFAULT_FRAME_CAP,
) -> tuple[Frame, int]:
    """Decode one frame from the head of ``data``.

    Returns the frame and the number of bytes consumed. Raises
    :class:`NeedMoreBytes` without consuming anything when the input is
    truncated, and :class:`ProtocolError` on oversized or malformed frames.
    """
    view = memoryview(data)
    if len(view) < HEADER_LEN:
        raise NeedMoreBytes(HEADER_LEN - len(view))
    (length,) = struct.unpack(">I", view[:HEADER_LEN])
    if length > cap:
        raise ProtocolError(f"frame length {length} exceeds cap {cap}")
    if length < FIXED_LEN:
        raise ProtocolError(f"frame length {length} shorter than fixed header")
    total = HEADER_LEN + length
    if len(view) < total:
        raise NeedMoreBytes(total - len(view))
    kind_byte = view[HEADER_LEN]
    try:
        kind = kinds(kind_byte)
    except ValueError:
        raise ProtocolError(f"unknown frame kind {kind_byte}") from None
    correlation = UUID(bytes=bytes(view[HEADER_LEN + 1 : HEADER_LEN + FIXED_LEN]))
    body = bytes(view[HEADER_LEN + FIXED_LEN : total])
    return Frame(kind, correlation, body), total


class FrameReader:
    """Incremental decoder for a byte stream arriving in arbitrary chunks."""

    def __init__(self, kinds: Type[IntEnum] = QueueKind, cap: int = DEFAULT_FRAME_CAP):
        self._kinds = kinds
        self._cap = cap
        self._buffer = bytearray()

    def feed(self, chunk: bytes) -> list[Frame]:
        self._buffer.extend(chunk)
        frames: list[Frame] = []
        while True:
            try:
                frame, consumed = decode_frame(self._buffer, self._kinds, self._cap)
            except NeedMoreBytes:
                break
            del self._buffer[:consumed]
            frames.append(frame)
        return frames


async def read_frame(
    reader: asyncio.StreamReader,
    kinds: Type[IntEnum] = QueueKind,
    cap: int = DEFAULT_FRAME_CAP,
) -> Frame:
    """Read exactly one frame; raises ``IncompleteReadError`` on EOF."""
    header = await reader.readexactly(HEADER_LEN)
    (length,) = struct.unpack(">I", header)
    if length > cap:
        raise ProtocolError(f"frame length {length} exceeds cap {cap}")
    if length < FIXED_LEN:
        raise ProtocolError(f"frame length {length} shorter than fixed header")
    rest = await reader.readexactly(length)
    frame, consumed = decode_frame(header + rest, kinds, cap)
    assert consumed == HEADER_LEN + length
    return frame


async def write_frame(writer: asyncio.StreamWriter, frame: Frame, cap: int = DEFAULT_FRAME_CAP) -> None:
    writer.write(encode_frame(frame, cap))
    await writer.drain()
