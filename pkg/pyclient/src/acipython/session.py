"""Interactive session against a running matrix gateway.

Typical flow, mirroring a notebook session::

    from acipython import AlchemistSession

    als = AlchemistSession()
    als.connect("127.0.0.1", 24960)
    als.request_workers(3)
    als.load_library("testlib")
    handle = als.send_matrix(array)
    u, s, v = als.run("testlib", "truncated_svd", [handle, 10])
    singular_values = als.fetch_matrix(s)
    als.close()

Sessions are single-threaded: one ordered driver connection plus one ordered
connection per allocated worker. Arrays in and out are NumPy arrays.
"""
from __future__ import annotations

import socket
from dataclasses import dataclass

import numpy as np

from . import layouts, protocol
from .protocol import F32, F64, ProtocolError

DEFAULT_BUFFER = 100 * 2**20

_DTYPES = {F64: np.dtype("<f8"), F32: np.dtype("<f4")}


@dataclass(frozen=True)
class MatrixHandle:
    """A matrix living on the gateway workers, addressed by id."""

    id: int
    m: int
    n: int
    pair: tuple[str, str]
    elem_code: int


class _Link:
    """One ordered frame connection."""

    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port))
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass

    def _recv(self, count: int) -> bytes:
        parts = []
        while count:
            piece = self.sock.recv(min(count, 1 << 20))
            if not piece:
                raise ProtocolError("connection closed by gateway")
            parts.append(piece)
            count -= len(piece)
        return b"".join(parts)

    def send(self, command: int, session_id: int, payload: bytes = b"") -> None:
        self.sock.sendall(protocol.pack_frame(command, session_id, payload))

    def recv(self) -> tuple[int, bytes]:
        header = self._recv(protocol.HEADER_SIZE)
        version, command, _, _, length = protocol.HEADER.unpack(header)
        if version != protocol.VERSION:
            raise ProtocolError(f"gateway speaks protocol version {version}")
        payload = self._recv(length) if length else b""
        if command == protocol.ERROR:
            raise protocol.parse_error(payload)
        return command, payload

    def call(self, command: int, session_id: int, payload: bytes = b"") -> bytes:
        self.send(command, session_id, payload)
        _, reply = self.recv()
        return reply


class AlchemistSession:
    """Client session: connect, request workers, move matrices, run functions."""

    def __init__(self):
        self.driver: _Link | None = None
        self.session_id = 0
        self.buffer_bytes = DEFAULT_BUFFER
        self.workers: list[_Link] = []
        self.num_workers = 0
        self._libs: dict[str, int] = {}

    # -- lifecycle -----------------------------------------------------------

    def connect(self, hostname: str, port: int, buffer_bytes: int = DEFAULT_BUFFER) -> "AlchemistSession":
        self.driver = _Link(hostname, int(port))
        try:
            reply = self.driver.call(protocol.HANDSHAKE, 0, protocol.handshake_payload(buffer_bytes))
            self.session_id, self.buffer_bytes = protocol.parse_handshake_ok(reply)
        except BaseException:
            self.driver.close()
            self.driver = None
            raise
        return self

    def connect_from_file(self, path: str, buffer_bytes: int = DEFAULT_BUFFER) -> "AlchemistSession":
        with open(path, "r", encoding="utf-8") as fh:
            hostname, _, port = fh.read().strip().rpartition(":")
        return self.connect(hostname, int(port), buffer_bytes)

    def close(self) -> None:
        if self.driver is not None:
            try:
                self.driver.call(protocol.CLOSE_SESSION, self.session_id)
            finally:
                self.driver.close()
                for link in self.workers:
                    link.close()
                self.driver = None
                self.workers = []

    def __enter__(self) -> "AlchemistSession":
        return self

    def __exit__(self, *exc) -> None:
        if self.driver is not None:
            self.close()

    # -- driver calls ----------------------------------------------------------

    def _require_driver(self) -> _Link:
        if self.driver is None:
            raise ProtocolError("not connected; call connect() first")
        return self.driver

    def request_workers(self, num_workers: int) -> list[tuple[int, int, str, int]]:
        reply = self._require_driver().call(
            protocol.REQUEST_WORKERS, self.session_id, protocol.request_workers_payload(num_workers)
        )
        _, _, endpoints = protocol.parse_worker_list(reply)
        self.num_workers = len(endpoints)
        self.workers = [_Link(host, port) for _, _, host, port in endpoints]
        return endpoints

    def load_library(self, name: str) -> int:
        reply = self._require_driver().call(
            protocol.LOAD_LIBRARY, self.session_id, protocol.load_library_payload(name)
        )
        lib_id = protocol.parse_library_ok(reply)
        self._libs[name] = lib_id
        return lib_id

    def run(self, lib, function: str, args: list) -> list:
        lib_id = self._libs[lib] if isinstance(lib, str) else int(lib)
        reply = self._require_driver().call(
            protocol.RUN_TASK, self.session_id, protocol.task_payload(lib_id, function, args)
        )
        return protocol.parse_values(reply)

    # -- matrices ---------------------------------------------------------------

    def _create(self, m: int, n: int, pair: tuple[str, str], elem_code: int) -> MatrixHandle:
        reply = self._require_driver().call(
            protocol.CREATE_MATRIX,
            self.session_id,
            protocol.create_matrix_payload(m, n, pair, elem_code),
        )
        handle_id, m, n, pair, elem_code, _shapes = protocol.parse_create_ok(reply)
        return MatrixHandle(handle_id, m, n, pair, elem_code)

    def send_matrix(self, array: np.ndarray, pair="VC_STAR") -> MatrixHandle:
        """Upload a dense 2-D array; each worker receives only what it owns."""
        if not self.workers:
            raise ProtocolError("no workers allocated; call request_workers() first")
        pair = layouts.normalize_pair(pair)
        array = np.asarray(array)
        if array.ndim != 2:
            raise ValueError(f"send_matrix needs a matrix, got shape {array.shape}")
        elem_code = F32 if array.dtype == np.float32 else F64
        array = np.ascontiguousarray(array, dtype=_DTYPES[elem_code])
        m, n = array.shape
        handle = self._create(m, n, pair, elem_code)
        for rank, link in enumerate(self.workers):
            row_sel, col_sel = layouts.local_selection(self.num_workers, pair, rank, m, n)
            if row_sel[2] == 0 or col_sel[2] == 0:
                continue
            local = array[
                row_sel[0] :: row_sel[1],
                col_sel[0] :: col_sel[1],
            ].tobytes()
            self._send_block(link, handle, row_sel, col_sel, local)
        return handle

    def _send_block(self, link: _Link, handle: MatrixHandle, row_sel, col_sel, data: bytes) -> None:
        width = protocol.ELEM_WIDTH[handle.elem_code]
        capacity = (self.buffer_bytes - protocol.HEADER_SIZE - protocol.BLOCK_META.size) // width
        if capacity < 1:
            raise ProtocolError("negotiated buffer cannot carry block metadata")
        total = len(data) // width
        offset = 0
        while True:
            take = min(capacity, total - offset)
            payload = protocol.block_payload(
                handle.id, row_sel, col_sel, handle.elem_code, offset,
                data[offset * width : (offset + take) * width],
            )
            reply = link.call(protocol.SEND_BLOCK, self.session_id, payload)
            protocol.parse_send_ack(reply)
            offset += take
            if offset >= total:
                return

    def fetch_matrix(self, handle: MatrixHandle) -> np.ndarray:
        """Download a complete matrix, reassembling every worker's block."""
        if not self.workers:
            raise ProtocolError("no workers allocated")
        dtype = _DTYPES[handle.elem_code]
        out = np.empty((handle.m, handle.n), dtype=dtype)
        for rank, link in enumerate(self.workers):
            row_sel, col_sel = layouts.local_selection(
                self.num_workers, handle.pair, rank, handle.m, handle.n
            )
            expected = row_sel[2] * col_sel[2]
            if expected == 0:
                continue
            link.send(
                protocol.FETCH_BLOCK,
                self.session_id,
                protocol.fetch_payload(handle.id, row_sel, col_sel),
            )
            pieces = {}
            got = 0
            while got < expected:
                _, payload = link.recv()
                chunk = protocol.parse_block(payload)
                count = len(chunk["elements"]) // dtype.itemsize
                if count == 0:
                    raise ProtocolError("gateway sent an empty chunk mid-selection")
                pieces[chunk["elem_offset"]] = chunk["elements"]
                got += count
            data = b"".join(pieces[k] for k in sorted(pieces))
            values = np.frombuffer(data, dtype=dtype).reshape(row_sel[2], col_sel[2])
            out[row_sel[0] :: row_sel[1], col_sel[0] :: col_sel[1]] = values
        return out
