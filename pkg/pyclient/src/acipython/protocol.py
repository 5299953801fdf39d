"""Byte-level encoding of the gateway protocol, written against PROTOCOL.md.

Only the documented wire format is used here; nothing is shared with the
gateway's own implementation.
"""
from __future__ import annotations

import struct

VERSION = 1
HEADER = struct.Struct("<BBHQI")
HEADER_SIZE = HEADER.size  # 16

# Command codes
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

# Element type codes and widths
F64 = 1
F32 = 2
ELEM_WIDTH = {F64: 8, F32: 4}

# Distribution scheme codes
SCHEMES = {"CIRC": 1, "STAR": 2, "MC": 3, "MR": 4, "VC": 5, "VR": 6}

# Value tags
TAG_HANDLE = 1
TAG_INT = 2
TAG_FLOAT = 3
TAG_STRING = 4
TAG_MATRIX = 5

BLOCK_META = struct.Struct("<QQQQQQQBQ")


class ProtocolError(Exception):
    pass


class GatewayFault(Exception):
    """Error frame from the gateway, carrying the documented error code."""

    def __init__(self, code: int, message: str):
        super().__init__(f"gateway error {code}: {message}")
        self.code = code
        self.message = message


def pack_frame(command: int, session_id: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(VERSION, command, 0, session_id, len(payload)) + payload


def pack_string(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def unpack_string(data: bytes, offset: int) -> tuple[str, int]:
    (length,) = struct.unpack_from("<H", data, offset)
    offset += 2
    return data[offset : offset + length].decode("utf-8"), offset + length


def pair_bytes(pair: tuple[str, str]) -> bytes:
    col, row = pair
    return bytes([SCHEMES[col.upper()], SCHEMES[row.upper()]])


def pair_names(col_code: int, row_code: int) -> tuple[str, str]:
    names = {v: k for k, v in SCHEMES.items()}
    return names[col_code], names[row_code]


# -- request payloads ---------------------------------------------------------


def handshake_payload(buffer_bytes: int) -> bytes:
    return struct.pack("<Q", buffer_bytes)


def request_workers_payload(count: int) -> bytes:
    return struct.pack("<I", count)


def load_library_payload(name: str) -> bytes:
    return pack_string(name)


def create_matrix_payload(m: int, n: int, pair: tuple[str, str], elem_code: int) -> bytes:
    return struct.pack("<QQ", m, n) + pair_bytes(pair) + bytes([elem_code])


def block_payload(
    handle_id: int,
    row_sel: tuple[int, int, int],
    col_sel: tuple[int, int, int],
    elem_code: int,
    elem_offset: int,
    elements: bytes,
) -> bytes:
    meta = BLOCK_META.pack(
        handle_id, row_sel[0], row_sel[1], row_sel[2],
        col_sel[0], col_sel[1], col_sel[2], elem_code, elem_offset,
    )
    return meta + elements


def fetch_payload(handle_id: int, row_sel, col_sel) -> bytes:
    return struct.pack(
        "<QQQQQQQ", handle_id, row_sel[0], row_sel[1], row_sel[2],
        col_sel[0], col_sel[1], col_sel[2],
    )


def task_payload(lib_id: int, function: str, args) -> bytes:
    out = [struct.pack("<I", lib_id), pack_string(function), struct.pack("<H", len(args))]
    for arg in args:
        out.append(encode_value(arg))
    return b"".join(out)


def encode_value(arg) -> bytes:
    from .session import MatrixHandle  # deferred: session depends on this module

    if isinstance(arg, MatrixHandle):
        return bytes([TAG_HANDLE]) + struct.pack("<Q", arg.id)
    if isinstance(arg, bool):
        raise ProtocolError("boolean task arguments are not supported")
    if isinstance(arg, int):
        return bytes([TAG_INT]) + struct.pack("<q", arg)
    if isinstance(arg, float):
        return bytes([TAG_FLOAT]) + struct.pack("<d", arg)
    if isinstance(arg, str):
        return bytes([TAG_STRING]) + pack_string(arg)
    raise ProtocolError(f"cannot encode argument of type {type(arg).__name__}")


# -- reply payloads -----------------------------------------------------------


def parse_handshake_ok(payload: bytes) -> tuple[int, int]:
    session_id, buffer_bytes = struct.unpack("<QQ", payload)
    return session_id, buffer_bytes


def parse_worker_list(payload: bytes):
    count, rows, cols = struct.unpack_from("<III", payload, 0)
    offset = 12
    workers = []
    for _ in range(count):
        session_rank, gateway_rank = struct.unpack_from("<II", payload, offset)
        (port,) = struct.unpack_from("<H", payload, offset + 8)
        host, offset = unpack_string(payload, offset + 10)
        workers.append((session_rank, gateway_rank, host, port))
    return rows, cols, workers


def parse_library_ok(payload: bytes) -> int:
    (lib_id,) = struct.unpack("<I", payload)
    return lib_id


def parse_create_ok(payload: bytes):
    handle_id, m, n = struct.unpack_from("<QQQ", payload, 0)
    pair = pair_names(payload[24], payload[25])
    elem_code = payload[26]
    (count,) = struct.unpack_from("<I", payload, 27)
    offset = 31
    shapes = []
    for _ in range(count):
        shapes.append(struct.unpack_from("<QQ", payload, offset))
        offset += 16
    return handle_id, m, n, pair, elem_code, shapes


def parse_block(payload: bytes):
    fields = BLOCK_META.unpack_from(payload, 0)
    return {
        "handle_id": fields[0],
        "row_sel": (fields[1], fields[2], fields[3]),
        "col_sel": (fields[4], fields[5], fields[6]),
        "elem_code": fields[7],
        "elem_offset": fields[8],
        "elements": payload[BLOCK_META.size :],
    }


def parse_send_ack(payload: bytes) -> tuple[int, bool]:
    (received,) = struct.unpack_from("<Q", payload, 0)
    return received, payload[8] == 1


def parse_error(payload: bytes) -> GatewayFault:
    (code,) = struct.unpack_from("<H", payload, 0)
    message, _ = unpack_string(payload, 2)
    return GatewayFault(code, message)


def parse_values(payload: bytes):
    from .session import MatrixHandle  # deferred: session depends on this module

    (count,) = struct.unpack_from("<H", payload, 0)
    offset = 2
    values = []
    for _ in range(count):
        tag = payload[offset]
        offset += 1
        if tag == TAG_HANDLE:
            # Bare references only appear in requests; surface the raw id.
            values.append(struct.unpack_from("<Q", payload, offset)[0])
            offset += 8
        elif tag == TAG_INT:
            values.append(struct.unpack_from("<q", payload, offset)[0])
            offset += 8
        elif tag == TAG_FLOAT:
            values.append(struct.unpack_from("<d", payload, offset)[0])
            offset += 8
        elif tag == TAG_STRING:
            text, offset = unpack_string(payload, offset)
            values.append(text)
        elif tag == TAG_MATRIX:
            hid, m, n = struct.unpack_from("<QQQ", payload, offset)
            pair = pair_names(payload[offset + 24], payload[offset + 25])
            elem_code = payload[offset + 26]
            offset += 27
            values.append(MatrixHandle(hid, m, n, pair, elem_code))
        else:
            raise ProtocolError(f"unknown value tag {tag}")
    return values
