"""Binary wire protocol: framing, command/payload codecs, block chunking.

Everything that crosses a TCP connection between clients and the gateway is
defined here and documented bit-exactly in PROTOCOL.md. All integers are
little-endian. A frame is a fixed 16-byte header followed by a payload that
never exceeds the session's negotiated buffer size minus the header.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import (
    DecodeError,
    FrameTooLargeError,
    IncompleteFrameError,
    InvalidBufferError,
    VersionMismatchError,
)
from .layout import FRAME_HEADER_BYTES, DistPair, DistScheme

PROTOCOL_VERSION = 1

# version u8 | command u8 | reserved u16 | session_id u64 | payload_len u32
_HEADER = struct.Struct("<BBHQI")
HEADER_SIZE = _HEADER.size
assert HEADER_SIZE == FRAME_HEADER_BYTES

DEFAULT_BUFFER_BYTES = 100 * 2**20  # gateway default message buffer
MIN_BUFFER_BYTES = 4096


class Command(IntEnum):
    HANDSHAKE = 1
    REQUEST_WORKERS = 2
    LOAD_LIBRARY = 3
    CREATE_MATRIX = 4
    SEND_BLOCK = 5
    FETCH_BLOCK = 6
    RUN_TASK = 7
    LIST_WORKERS = 8
    CLOSE_SESSION = 9
    OK = 10
    ERROR = 11


class ElemType(IntEnum):
    F64 = 1
    F32 = 2

    @property
    def nbytes(self) -> int:
        return 8 if self is ElemType.F64 else 4

    @property
    def dtype(self) -> np.dtype:
        return np.dtype("<f8") if self is ElemType.F64 else np.dtype("<f4")

    @classmethod
    def for_dtype(cls, dtype) -> "ElemType":
        kind = np.dtype(dtype)
        if kind == np.float64:
            return cls.F64
        if kind == np.float32:
            return cls.F32
        raise DecodeError(f"unsupported element dtype {kind}")


@dataclass(frozen=True)
class Frame:
    command: Command
    session_id: int = 0
    payload: bytes = b""
    version: int = PROTOCOL_VERSION


def encode_frame(frame: Frame, buffer_bytes: int | None = None) -> bytes:
    """Serialize a frame, enforcing the buffer cap when one is given."""
    size = HEADER_SIZE + len(frame.payload)
    if buffer_bytes is not None and size > buffer_bytes:
        raise FrameTooLargeError(
            f"frame of {size} bytes exceeds buffer of {buffer_bytes}"
        )
    header = _HEADER.pack(
        frame.version, int(frame.command), 0, frame.session_id, len(frame.payload)
    )
    return header + frame.payload


def write_frame(sock, frame: Frame, buffer_bytes: int | None = None) -> None:
    """Send one frame without concatenating header and payload.

    Applies the same buffer-cap check as :func:`encode_frame`; this is the
    send path used by both the gateway and clients, so no frame on the wire
    can exceed the negotiated size.
    """
    size = HEADER_SIZE + len(frame.payload)
    if buffer_bytes is not None and size > buffer_bytes:
        raise FrameTooLargeError(f"frame of {size} bytes exceeds buffer of {buffer_bytes}")
    sock.sendall(
        _HEADER.pack(frame.version, int(frame.command), 0, frame.session_id, len(frame.payload))
    )
    if frame.payload:
        sock.sendall(frame.payload)


def parse_header(header: bytes) -> tuple[int, int, int, int]:
    """Split a raw 16-byte header into (version, command code, session, payload length)."""
    version, command, _, session_id, payload_len = _HEADER.unpack(header)
    return version, command, session_id, payload_len


def decode_frame(data: bytes | memoryview, offset: int = 0) -> tuple[Frame, int]:
    """Decode one frame starting at ``offset``; returns (frame, bytes consumed)."""
    view = memoryview(data)[offset:]
    if len(view) < HEADER_SIZE:
        raise IncompleteFrameError(f"need {HEADER_SIZE} header bytes, have {len(view)}")
    version, command, _, session_id, payload_len = _HEADER.unpack_from(view)
    if version != PROTOCOL_VERSION:
        raise VersionMismatchError(f"peer version {version}, expected {PROTOCOL_VERSION}")
    try:
        command = Command(command)
    except ValueError as exc:
        raise DecodeError(f"unknown command code {command}") from exc
    total = HEADER_SIZE + payload_len
    if len(view) < total:
        raise IncompleteFrameError(f"frame advertises {total} bytes, have {len(view)}")
    payload = bytes(view[HEADER_SIZE:total])
    return Frame(command=command, session_id=session_id, payload=payload), total


# ---------------------------------------------------------------------------
# Strings and primitive helpers

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DecodeError("string too long for wire encoding")
    return _U16.pack(len(raw)) + raw


def _unpack_str(payload: bytes, offset: int) -> tuple[str, int]:
    (length,) = _U16.unpack_from(payload, offset)
    offset += 2
    end = offset + length
    if end > len(payload):
        raise DecodeError("truncated string")
    return payload[offset:end].decode("utf-8"), end


def _need(payload: bytes, offset: int, count: int) -> None:
    if offset + count > len(payload):
        raise DecodeError(f"payload truncated at offset {offset}")


# ---------------------------------------------------------------------------
# Matrix blocks

# handle u64 | row start/stride/count u64 x3 | col start/stride/count u64 x3
# | elem type u8 | element offset u64
_BLOCK_META = struct.Struct("<QQQQQQQBQ")
BLOCK_META_SIZE = _BLOCK_META.size


@dataclass(frozen=True)
class BlockMessage:
    """Elements of a strided 2-D selection of a matrix handle, row-major.

    ``elem_offset``/``data`` may describe a contiguous segment of the
    selection's element sequence, so one logical block can travel as several
    buffer-capped messages.
    """

    handle_id: int
    row_start: int
    row_stride: int
    row_count: int
    col_start: int
    col_stride: int
    col_count: int
    elem_type: ElemType
    elem_offset: int = 0
    data: bytes | memoryview = b""  # memoryview on the hot decode path; equality is by content

    def __post_init__(self):
        width = self.elem_type.nbytes
        if len(self.data) % width:
            raise DecodeError(
                f"block data of {len(self.data)} bytes is not a multiple of {width}"
            )
        if self.elem_offset + self.elem_count > self.total_count:
            raise DecodeError("block segment exceeds its selection")

    @property
    def elem_count(self) -> int:
        return len(self.data) // self.elem_type.nbytes

    @property
    def total_count(self) -> int:
        return self.row_count * self.col_count

    @property
    def is_whole(self) -> bool:
        return self.elem_offset == 0 and self.elem_count == self.total_count


def encode_block(block: BlockMessage) -> bytes:
    meta = _BLOCK_META.pack(
        block.handle_id,
        block.row_start,
        block.row_stride,
        block.row_count,
        block.col_start,
        block.col_stride,
        block.col_count,
        int(block.elem_type),
        block.elem_offset,
    )
    return meta + block.data


def decode_block(payload: bytes | memoryview) -> BlockMessage:
    """Decode a block payload; a memoryview input keeps the element data zero-copy."""
    if len(payload) < BLOCK_META_SIZE:
        raise DecodeError("block payload shorter than its metadata")
    fields = _BLOCK_META.unpack_from(payload)
    try:
        elem_type = ElemType(fields[7])
    except ValueError as exc:
        raise DecodeError(f"unknown element type {fields[7]}") from exc
    return BlockMessage(
        handle_id=fields[0],
        row_start=fields[1],
        row_stride=fields[2],
        row_count=fields[3],
        col_start=fields[4],
        col_stride=fields[5],
        col_count=fields[6],
        elem_type=elem_type,
        elem_offset=fields[8],
        data=payload[BLOCK_META_SIZE:],
    )


def chunk_block(
    block: BlockMessage,
    buffer_bytes: int,
    session_id: int = 0,
    command: Command = Command.SEND_BLOCK,
) -> list[Frame]:
    """Split a block into frames that each fit the buffer.

    Element order is preserved; concatenating the chunks' data restores the
    original segment. Empty blocks still produce one frame.
    """
    width = block.elem_type.nbytes
    capacity = (buffer_bytes - HEADER_SIZE - BLOCK_META_SIZE) // width
    if capacity < 1:
        raise InvalidBufferError(
            f"buffer of {buffer_bytes} bytes cannot carry block metadata plus one element"
        )
    frames = []
    total = block.elem_count
    done = 0
    while True:
        take = min(capacity, total - done)
        piece = BlockMessage(
            handle_id=block.handle_id,
            row_start=block.row_start,
            row_stride=block.row_stride,
            row_count=block.row_count,
            col_start=block.col_start,
            col_stride=block.col_stride,
            col_count=block.col_count,
            elem_type=block.elem_type,
            elem_offset=block.elem_offset + done,
            data=block.data[done * width : (done + take) * width],
        )
        frames.append(Frame(command=command, session_id=session_id, payload=encode_block(piece)))
        done += take
        if done >= total:
            break
    return frames


def iter_block_frames(
    block: BlockMessage,
    buffer_bytes: int,
    session_id: int = 0,
    command: Command = Command.SEND_BLOCK,
):
    """Yield (header, metadata, element view) triples for a chunked block.

    Concatenating each triple gives exactly the bytes of the corresponding
    :func:`chunk_block` frame; hot paths send the three pieces separately to
    avoid copying multi-megabyte payloads.
    """
    width = block.elem_type.nbytes
    capacity = (buffer_bytes - HEADER_SIZE - BLOCK_META_SIZE) // width
    if capacity < 1:
        raise InvalidBufferError(
            f"buffer of {buffer_bytes} bytes cannot carry block metadata plus one element"
        )
    data = memoryview(block.data)
    total = block.elem_count
    done = 0
    while True:
        take = min(capacity, total - done)
        payload_len = BLOCK_META_SIZE + take * width
        header = _HEADER.pack(PROTOCOL_VERSION, int(command), 0, session_id, payload_len)
        meta = _BLOCK_META.pack(
            block.handle_id,
            block.row_start,
            block.row_stride,
            block.row_count,
            block.col_start,
            block.col_stride,
            block.col_count,
            int(block.elem_type),
            block.elem_offset + done,
        )
        yield header, meta, data[done * width : (done + take) * width]
        done += take
        if done >= total:
            return


def stream_block(
    sock,
    block: BlockMessage,
    buffer_bytes: int,
    session_id: int = 0,
    command: Command = Command.SEND_BLOCK,
) -> int:
    """Send a block as buffer-capped frames without building payload copies.

    Returns the number of frames sent; the byte stream is identical to
    sending ``chunk_block(...)`` frames.
    """
    frames = 0
    for header, meta, view in iter_block_frames(block, buffer_bytes, session_id, command):
        sock.sendall(header)
        sock.sendall(meta)
        if len(view):
            sock.sendall(view)
        frames += 1
    return frames


def assemble_chunks(chunks: Sequence[BlockMessage]) -> BlockMessage:
    """Reassemble chunk messages (any order) into one whole block."""
    if not chunks:
        raise DecodeError("no chunks to assemble")
    first = chunks[0]
    key = (
        first.handle_id,
        first.row_start,
        first.row_stride,
        first.row_count,
        first.col_start,
        first.col_stride,
        first.col_count,
        first.elem_type,
    )
    ordered = sorted(chunks, key=lambda b: b.elem_offset)
    parts = []
    cursor = 0
    for piece in ordered:
        if (
            piece.handle_id,
            piece.row_start,
            piece.row_stride,
            piece.row_count,
            piece.col_start,
            piece.col_stride,
            piece.col_count,
            piece.elem_type,
        ) != key:
            raise DecodeError("chunks describe different selections")
        if piece.elem_offset != cursor:
            raise DecodeError(f"chunk gap at element {cursor}")
        parts.append(piece.data)
        cursor += piece.elem_count
    if cursor != first.total_count:
        raise DecodeError(f"chunks cover {cursor} of {first.total_count} elements")
    return BlockMessage(
        handle_id=first.handle_id,
        row_start=first.row_start,
        row_stride=first.row_stride,
        row_count=first.row_count,
        col_start=first.col_start,
        col_stride=first.col_stride,
        col_count=first.col_count,
        elem_type=first.elem_type,
        elem_offset=0,
        data=b"".join(parts),
    )


# ---------------------------------------------------------------------------
# Task calls and tagged values


class ValueTag(IntEnum):
    HANDLE = 1
    INT = 2
    FLOAT = 3
    STRING = 4
    MATRIX = 5


@dataclass(frozen=True)
class HandleRef:
    """Reference to a server-side matrix by id (requests encode handles by id only)."""

    id: int


@dataclass(frozen=True)
class MatrixHandle:
    """Session-scoped identifier plus metadata for a server-side matrix."""

    id: int
    m: int
    n: int
    pair: DistPair
    elem_type: ElemType

    def ref(self) -> HandleRef:
        return HandleRef(self.id)


TaskValue = "HandleRef | int | float | str | MatrixHandle"


def encode_values(values: Sequence) -> bytes:
    out = [_U16.pack(len(values))]
    for value in values:
        if isinstance(value, HandleRef):
            out.append(bytes([ValueTag.HANDLE]) + _U64.pack(value.id))
        elif isinstance(value, MatrixHandle):
            out.append(
                bytes([ValueTag.MATRIX])
                + _U64.pack(value.id)
                + _U64.pack(value.m)
                + _U64.pack(value.n)
                + bytes([value.pair.col_scheme.value, value.pair.row_scheme.value])
                + bytes([int(value.elem_type)])
            )
        elif isinstance(value, bool):
            raise DecodeError("boolean task values are not part of the protocol")
        elif isinstance(value, int):
            out.append(bytes([ValueTag.INT]) + _I64.pack(value))
        elif isinstance(value, float):
            out.append(bytes([ValueTag.FLOAT]) + _F64.pack(value))
        elif isinstance(value, str):
            out.append(bytes([ValueTag.STRING]) + _pack_str(value))
        else:
            raise DecodeError(f"cannot encode task value of type {type(value).__name__}")
    return b"".join(out)


def decode_values(payload: bytes, offset: int = 0) -> tuple[list, int]:
    _need(payload, offset, 2)
    (count,) = _U16.unpack_from(payload, offset)
    offset += 2
    values: list = []
    for _ in range(count):
        _need(payload, offset, 1)
        tag = payload[offset]
        offset += 1
        if tag == ValueTag.HANDLE:
            _need(payload, offset, 8)
            values.append(HandleRef(_U64.unpack_from(payload, offset)[0]))
            offset += 8
        elif tag == ValueTag.INT:
            _need(payload, offset, 8)
            values.append(_I64.unpack_from(payload, offset)[0])
            offset += 8
        elif tag == ValueTag.FLOAT:
            _need(payload, offset, 8)
            values.append(_F64.unpack_from(payload, offset)[0])
            offset += 8
        elif tag == ValueTag.STRING:
            text, offset = _unpack_str(payload, offset)
            values.append(text)
        elif tag == ValueTag.MATRIX:
            _need(payload, offset, 8 * 3 + 3)
            hid = _U64.unpack_from(payload, offset)[0]
            m = _U64.unpack_from(payload, offset + 8)[0]
            n = _U64.unpack_from(payload, offset + 16)[0]
            col, row, et = payload[offset + 24 : offset + 27]
            offset += 27
            try:
                pair = DistPair(DistScheme(col), DistScheme(row))
                elem_type = ElemType(et)
            except ValueError as exc:
                raise DecodeError("bad matrix metadata") from exc
            values.append(MatrixHandle(id=hid, m=m, n=n, pair=pair, elem_type=elem_type))
        else:
            raise DecodeError(f"unknown value tag {tag}")
    return values, offset


def encode_task(lib_id: int, function_name: str, args: Sequence) -> bytes:
    """Payload of a RUN_TASK request."""
    if not function_name:
        raise ValueError("function name must be non-empty")
    return _U32.pack(lib_id) + _pack_str(function_name) + encode_values(args)


def decode_task(payload: bytes) -> tuple[int, str, list]:
    _need(payload, 0, 4)
    (lib_id,) = _U32.unpack_from(payload, 0)
    name, offset = _unpack_str(payload, 4)
    if not name:
        raise DecodeError("empty function name")
    values, offset = decode_values(payload, offset)
    if offset != len(payload):
        raise DecodeError("trailing bytes after task payload")
    return lib_id, name, values


# ---------------------------------------------------------------------------
# Control payloads


def encode_handshake(proposed_buffer: int) -> bytes:
    return _U64.pack(proposed_buffer)


def decode_handshake(payload: bytes) -> int:
    if len(payload) != 8:
        raise DecodeError("handshake payload must be 8 bytes")
    return _U64.unpack(payload)[0]


def encode_handshake_ok(session_id: int, buffer_bytes: int) -> bytes:
    return _U64.pack(session_id) + _U64.pack(buffer_bytes)


def decode_handshake_ok(payload: bytes) -> tuple[int, int]:
    if len(payload) != 16:
        raise DecodeError("handshake reply must be 16 bytes")
    return _U64.unpack_from(payload, 0)[0], _U64.unpack_from(payload, 8)[0]


def encode_request_workers(n: int) -> bytes:
    return _U32.pack(n)


def decode_request_workers(payload: bytes) -> int:
    if len(payload) != 4:
        raise DecodeError("worker request payload must be 4 bytes")
    return _U32.unpack(payload)[0]


@dataclass(frozen=True)
class WorkerEndpoint:
    """Where one allocated worker listens, ordered by session-local rank."""

    session_rank: int
    gateway_rank: int
    host: str
    port: int


def encode_worker_list(grid_rows: int, grid_cols: int, workers: Sequence[WorkerEndpoint]) -> bytes:
    out = [_U32.pack(len(workers)), _U32.pack(grid_rows), _U32.pack(grid_cols)]
    for w in workers:
        out.append(_U32.pack(w.session_rank) + _U32.pack(w.gateway_rank) + _U16.pack(w.port))
        out.append(_pack_str(w.host))
    return b"".join(out)


def decode_worker_list(payload: bytes) -> tuple[int, int, list[WorkerEndpoint]]:
    _need(payload, 0, 12)
    count = _U32.unpack_from(payload, 0)[0]
    rows = _U32.unpack_from(payload, 4)[0]
    cols = _U32.unpack_from(payload, 8)[0]
    offset = 12
    workers = []
    for _ in range(count):
        _need(payload, offset, 10)
        srank = _U32.unpack_from(payload, offset)[0]
        grank = _U32.unpack_from(payload, offset + 4)[0]
        port = _U16.unpack_from(payload, offset + 8)[0]
        host, offset = _unpack_str(payload, offset + 10)
        workers.append(WorkerEndpoint(srank, grank, host, port))
    return rows, cols, workers


def encode_load_library(name: str) -> bytes:
    return _pack_str(name)


def decode_load_library(payload: bytes) -> str:
    name, offset = _unpack_str(payload, 0)
    if offset != len(payload):
        raise DecodeError("trailing bytes after library name")
    return name


def encode_library_ok(lib_id: int) -> bytes:
    return _U32.pack(lib_id)


def decode_library_ok(payload: bytes) -> int:
    if len(payload) != 4:
        raise DecodeError("library reply must be 4 bytes")
    return _U32.unpack(payload)[0]


def encode_create_matrix(m: int, n: int, pair: DistPair, elem_type: ElemType) -> bytes:
    return (
        _U64.pack(m)
        + _U64.pack(n)
        + bytes([pair.col_scheme.value, pair.row_scheme.value, int(elem_type)])
    )


def decode_create_matrix(payload: bytes) -> tuple[int, int, DistPair, ElemType]:
    if len(payload) != 19:
        raise DecodeError("create-matrix payload must be 19 bytes")
    m = _U64.unpack_from(payload, 0)[0]
    n = _U64.unpack_from(payload, 8)[0]
    try:
        scheme_col = DistScheme(payload[16])
        scheme_row = DistScheme(payload[17])
        elem_type = ElemType(payload[18])
    except ValueError as exc:
        raise DecodeError("bad layout or element type byte") from exc
    return m, n, DistPair(scheme_col, scheme_row), elem_type


def encode_create_ok(handle: MatrixHandle, local_shapes: Sequence[tuple[int, int]]) -> bytes:
    out = [
        _U64.pack(handle.id),
        _U64.pack(handle.m),
        _U64.pack(handle.n),
        bytes([handle.pair.col_scheme.value, handle.pair.row_scheme.value, int(handle.elem_type)]),
        _U32.pack(len(local_shapes)),
    ]
    for lr, lc in local_shapes:
        out.append(_U64.pack(lr) + _U64.pack(lc))
    return b"".join(out)


def decode_create_ok(payload: bytes) -> tuple[MatrixHandle, list[tuple[int, int]]]:
    _need(payload, 0, 31)
    hid = _U64.unpack_from(payload, 0)[0]
    m = _U64.unpack_from(payload, 8)[0]
    n = _U64.unpack_from(payload, 16)[0]
    try:
        pair = DistPair(DistScheme(payload[24]), DistScheme(payload[25]))
        elem_type = ElemType(payload[26])
    except ValueError as exc:
        raise DecodeError("bad layout or element type byte") from exc
    count = _U32.unpack_from(payload, 27)[0]
    offset = 31
    shapes = []
    for _ in range(count):
        _need(payload, offset, 16)
        shapes.append(
            (_U64.unpack_from(payload, offset)[0], _U64.unpack_from(payload, offset + 8)[0])
        )
        offset += 16
    return MatrixHandle(id=hid, m=m, n=n, pair=pair, elem_type=elem_type), shapes


_FETCH = struct.Struct("<QQQQQQQ")


def encode_fetch(handle_id: int, selection: tuple[int, int, int, int, int, int]) -> bytes:
    return _FETCH.pack(handle_id, *selection)


def decode_fetch(payload: bytes) -> tuple[int, tuple[int, int, int, int, int, int]]:
    if len(payload) != _FETCH.size:
        raise DecodeError(f"fetch payload must be {_FETCH.size} bytes")
    fields = _FETCH.unpack(payload)
    return fields[0], fields[1:]


def encode_send_ack(received: int, complete: bool) -> bytes:
    return _U64.pack(received) + bytes([1 if complete else 0])


def decode_send_ack(payload: bytes) -> tuple[int, bool]:
    if len(payload) != 9:
        raise DecodeError("send ack must be 9 bytes")
    return _U64.unpack_from(payload, 0)[0], payload[8] == 1


def encode_error(code: int, message: str) -> bytes:
    return _U16.pack(code) + _pack_str(message)


def decode_error(payload: bytes) -> tuple[int, str]:
    _need(payload, 0, 2)
    (code,) = _U16.unpack_from(payload, 0)
    message, _ = _unpack_str(payload, 2)
    return code, message


@dataclass(frozen=True)
class WorkerStatus:
    rank: int
    host: str
    port: int
    session_id: int  # 0 when free


def encode_worker_status(entries: Sequence[WorkerStatus]) -> bytes:
    out = [_U32.pack(len(entries))]
    for e in entries:
        out.append(_U32.pack(e.rank) + _U16.pack(e.port) + _U64.pack(e.session_id))
        out.append(_pack_str(e.host))
    return b"".join(out)


def decode_worker_status(payload: bytes) -> list[WorkerStatus]:
    _need(payload, 0, 4)
    count = _U32.unpack_from(payload, 0)[0]
    offset = 4
    entries = []
    for _ in range(count):
        _need(payload, offset, 14)
        rank = _U32.unpack_from(payload, offset)[0]
        port = _U16.unpack_from(payload, offset + 4)[0]
        session_id = _U64.unpack_from(payload, offset + 6)[0]
        host, offset = _unpack_str(payload, offset + 14)
        entries.append(WorkerStatus(rank, host, port, session_id))
    return entries
