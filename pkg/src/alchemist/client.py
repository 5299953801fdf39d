"""Native client: sessions, block routing, and the three send strategies.

``send_matrix`` pushes an in-memory dense array, ``send_blocked`` routes the
chunks of a tiled source independently, and ``send_rows`` does the same for a
row-partitioned source. All three land the identical distributed content for
a given layout. Per-worker traffic is sequential on that worker's connection;
different workers are driven concurrently.
"""
from __future__ import annotations

import socket
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import layout, wire
from .errors import (
    AlchemistError,
    InvalidSourceError,
    OwnershipViolationError,
    ProtocolError,
    error_for_code,
)
from .wire import BlockMessage, Command, ElemType, Frame, MatrixHandle


class Connection:
    """One TCP connection speaking ordered frames."""

    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port))
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.lock = threading.Lock()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def _recv_exact(self, count: int) -> bytes | bytearray:
        if count <= 65536:
            chunks = []
            remaining = count
            while remaining:
                piece = self.sock.recv(remaining)
                if not piece:
                    raise ProtocolError("connection closed mid-frame")
                chunks.append(piece)
                remaining -= len(piece)
            return chunks[0] if len(chunks) == 1 else b"".join(chunks)
        buf = bytearray(count)
        view = memoryview(buf)
        filled = 0
        while filled < count:
            n = self.sock.recv_into(view[filled:], count - filled)
            if n == 0:
                raise ProtocolError("connection closed mid-frame")
            filled += n
        return buf

    def send_frame(self, frame: Frame, buffer_bytes: int | None) -> None:
        wire.write_frame(self.sock, frame, buffer_bytes)

    def recv_frame(self) -> Frame:
        header = self._recv_exact(wire.HEADER_SIZE)
        version, command_code, session_id, payload_len = wire.parse_header(header)
        if version != wire.PROTOCOL_VERSION:
            raise ProtocolError(f"peer protocol version {version}")
        payload = self._recv_exact(payload_len) if payload_len else b""
        return Frame(command=Command(command_code), session_id=session_id, payload=payload)

    def recv_reply(self) -> Frame:
        """Receive one reply frame, raising the mapped exception on ERROR."""
        reply = self.recv_frame()
        if reply.command == Command.ERROR:
            code, message = wire.decode_error(reply.payload)
            raise error_for_code(code, message)
        return reply

    def request(self, frame: Frame, buffer_bytes: int | None) -> Frame:
        """Send one frame and return its single reply, raising on ERROR."""
        with self.lock:
            self.send_frame(frame, buffer_bytes)
            return self.recv_reply()

    def send_block(self, block: BlockMessage, buffer_bytes: int, session_id: int) -> tuple[int, bool]:
        """Send one block a frame at a time, awaiting each ack before the next."""
        received = 0
        complete = False
        with self.lock:
            for header, meta, view in wire.iter_block_frames(block, buffer_bytes, session_id):
                self.sock.sendall(header)
                self.sock.sendall(meta)
                if len(view):
                    self.sock.sendall(view)
                reply = self.recv_reply()
                count, complete = wire.decode_send_ack(reply.payload)
                received += count
        return received, complete

    def request_chunks(self, frame: Frame, buffer_bytes: int | None, expected: int) -> list[BlockMessage]:
        """Send a fetch and collect the chunked block reply covering ``expected`` elements."""
        chunks: list[BlockMessage] = []
        got = 0
        with self.lock:
            self.send_frame(frame, buffer_bytes)
            while True:
                reply = self.recv_reply()
                chunk = wire.decode_block(memoryview(reply.payload))
                chunks.append(chunk)
                got += chunk.elem_count
                if got >= expected:
                    return chunks
                if chunk.elem_count == 0:
                    raise ProtocolError("empty chunk before selection was covered")


# ---------------------------------------------------------------------------
# Client-side sources


class BlockedSource:
    """A matrix available as a grid of chunks addressed by (name, bi, bj)."""

    def __init__(self, name: str, blocks: dict[tuple[int, int], np.ndarray]):
        if not blocks:
            raise InvalidSourceError("blocked source has no chunks")
        self.name = name
        self.blocks = {key: np.asarray(val) for key, val in blocks.items()}
        nbi = max(bi for bi, _ in self.blocks) + 1
        nbj = max(bj for _, bj in self.blocks) + 1
        heights = [None] * nbi
        widths = [None] * nbj
        for bi in range(nbi):
            for bj in range(nbj):
                chunk = self.blocks.get((bi, bj))
                if chunk is None:
                    raise InvalidSourceError(f"missing chunk ({name}, {bi}, {bj})")
                if chunk.ndim != 2:
                    raise InvalidSourceError(f"chunk ({bi}, {bj}) is not a matrix")
                h, w = chunk.shape
                if heights[bi] is None:
                    heights[bi] = h
                elif heights[bi] != h:
                    raise InvalidSourceError(f"chunk row {bi} has inconsistent heights")
                if widths[bj] is None:
                    widths[bj] = w
                elif widths[bj] != w:
                    raise InvalidSourceError(f"chunk column {bj} has inconsistent widths")
        self.row_offsets = np.concatenate(([0], np.cumsum(heights))).astype(int)
        self.col_offsets = np.concatenate(([0], np.cumsum(widths))).astype(int)
        self.m = int(self.row_offsets[-1])
        self.n = int(self.col_offsets[-1])

    @classmethod
    def from_matrix(cls, name: str, matrix: np.ndarray, chunk_shape: tuple[int, int]) -> "BlockedSource":
        matrix = np.asarray(matrix)
        ch, cw = chunk_shape
        if ch < 1 or cw < 1:
            raise InvalidSourceError(f"chunk shape must be positive, got {chunk_shape}")
        blocks = {}
        for bi, r0 in enumerate(range(0, max(matrix.shape[0], 1), ch)):
            for bj, c0 in enumerate(range(0, max(matrix.shape[1], 1), cw)):
                blocks[(bi, bj)] = matrix[r0 : r0 + ch, c0 : c0 + cw]
        return cls(name, blocks)

    def assemble(self) -> np.ndarray:
        out = np.zeros((self.m, self.n), dtype=next(iter(self.blocks.values())).dtype)
        for (bi, bj), chunk in self.blocks.items():
            out[
                self.row_offsets[bi] : self.row_offsets[bi + 1],
                self.col_offsets[bj] : self.col_offsets[bj + 1],
            ] = chunk
        return out


class RowPartitionedSource:
    """A matrix available as disjoint contiguous row partitions."""

    def __init__(self, partitions: list[tuple[int, np.ndarray]]):
        if not partitions:
            raise InvalidSourceError("row-partitioned source has no partitions")
        cleaned = sorted(
            ((int(start), np.atleast_2d(np.asarray(rows))) for start, rows in partitions),
            key=lambda item: item[0],
        )
        widths = {rows.shape[1] for _, rows in cleaned}
        if len(widths) != 1:
            raise InvalidSourceError("partitions have differing widths")
        cursor = 0
        for start, rows in cleaned:
            if start != cursor:
                kind = "overlap" if start < cursor else "gap"
                raise InvalidSourceError(f"row partitions have a {kind} at row {min(start, cursor)}")
            cursor += rows.shape[0]
        self.partitions = cleaned
        self.m = cursor
        self.n = widths.pop()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, num_partitions: int) -> "RowPartitionedSource":
        matrix = np.asarray(matrix)
        m = matrix.shape[0]
        num_partitions = max(1, min(num_partitions, max(m, 1)))
        bounds = np.linspace(0, m, num_partitions + 1).astype(int)
        return cls([(int(lo), matrix[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])])

    def row_ranges(self) -> list[tuple[int, int]]:
        return [(start, start + rows.shape[0]) for start, rows in self.partitions]


# ---------------------------------------------------------------------------
# Routing


def validate_block_routing(
    grid: layout.ProcessGrid,
    handle: MatrixHandle,
    session_rank: int,
    block: BlockMessage,
) -> None:
    """Check a block's strided element set against the layout's owner map."""
    owned_rows, owned_cols = layout.local_selection(
        grid, handle.pair, session_rank, handle.m, handle.n
    )
    for axis, sel, owned, extent in (
        ("row", (block.row_start, block.row_stride, block.row_count), owned_rows, handle.m),
        ("col", (block.col_start, block.col_stride, block.col_count), owned_cols, handle.n),
    ):
        start, stride, count = sel
        if count == 0:
            continue
        ostart, ostride, ocount = owned
        last = start + stride * (count - 1)
        if (
            ocount == 0
            or (start - ostart) % ostride
            or (count > 1 and stride % ostride)
            or last >= extent
        ):
            raise OwnershipViolationError(
                f"{axis} selection ({start},{stride},{count}) not owned by rank {session_rank}"
            )


def _route_chunk(
    grid: layout.ProcessGrid,
    handle: MatrixHandle,
    chunk: np.ndarray,
    row_offset: int,
    col_offset: int,
) -> dict[int, BlockMessage]:
    """Split one dense chunk into per-rank strided block messages."""
    h, w = chunk.shape
    out: dict[int, BlockMessage] = {}
    if h == 0 or w == 0:
        return out
    dtype = handle.elem_type.dtype
    for rank in range(grid.size):
        if layout.local_shape(grid, handle.pair, rank, handle.m, handle.n) == (0, 0):
            continue
        (r0, rstr, _), (c0, cstr, _) = layout.local_selection(
            grid, handle.pair, rank, handle.m, handle.n
        )
        g0 = row_offset + ((r0 - row_offset) % rstr)
        if g0 >= row_offset + h:
            continue
        rc = (row_offset + h - g0 + rstr - 1) // rstr
        k0 = col_offset + ((c0 - col_offset) % cstr)
        if k0 >= col_offset + w:
            continue
        cc = (col_offset + w - k0 + cstr - 1) // cstr
        sub = np.asarray(chunk[g0 - row_offset :: rstr, k0 - col_offset :: cstr], dtype=dtype)
        out[rank] = BlockMessage(
            handle_id=handle.id,
            row_start=g0,
            row_stride=rstr,
            row_count=rc,
            col_start=k0,
            col_stride=cstr,
            col_count=cc,
            elem_type=handle.elem_type,
            data=sub.tobytes(),
        )
    return out


def _elem_type_for(matrix: np.ndarray) -> ElemType:
    if matrix.dtype == np.float32:
        return ElemType.F32
    return ElemType.F64


# ---------------------------------------------------------------------------
# Session


class ClientSession:
    """A connected session: driver link, per-worker links, and handle registry."""

    def __init__(self, host: str, port: int, buffer_bytes: int = wire.DEFAULT_BUFFER_BYTES):
        self.host = host
        self.port = port
        self.driver = Connection(host, port)
        try:
            reply = self.driver.request(
                Frame(Command.HANDSHAKE, 0, wire.encode_handshake(buffer_bytes)), buffer_bytes
            )
        except BaseException:
            self.driver.close()
            raise
        self.session_id, self.buffer_bytes = wire.decode_handshake_ok(reply.payload)
        self.grid: layout.ProcessGrid | None = None
        self.workers: dict[int, Connection] = {}
        self.worker_endpoints: list[wire.WorkerEndpoint] = []
        self.handles: dict[int, MatrixHandle] = {}
        self._libs: dict[str, int] = {}
        self._closed = False

    # -- lifecycle ------------------------------------------------------------

    @classmethod
    def connect(cls, host: str, port: int, buffer_bytes: int = wire.DEFAULT_BUFFER_BYTES) -> "ClientSession":
        return cls(host, port, buffer_bytes)

    @classmethod
    def from_address_file(cls, path: str, buffer_bytes: int = wire.DEFAULT_BUFFER_BYTES) -> "ClientSession":
        with open(path, "r", encoding="utf-8") as fh:
            address = fh.read().strip()
        host, _, port = address.rpartition(":")
        return cls(host, int(port), buffer_bytes)

    def close(self) -> None:
        if self._closed:
            raise AlchemistError("session already closed")
        self._closed = True
        try:
            self.driver.request(Frame(Command.CLOSE_SESSION, self.session_id), self.buffer_bytes)
        finally:
            self.driver.close()
            for conn in self.workers.values():
                conn.close()

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc_info) -> None:
        if not self._closed:
            self.close()

    # -- driver operations ------------------------------------------------------

    def _driver_request(self, command: Command, payload: bytes = b"") -> Frame:
        return self.driver.request(Frame(command, self.session_id, payload), self.buffer_bytes)

    def request_workers(self, n: int) -> list[wire.WorkerEndpoint]:
        reply = self._driver_request(Command.REQUEST_WORKERS, wire.encode_request_workers(n))
        rows, cols, endpoints = wire.decode_worker_list(reply.payload)
        self.grid = layout.ProcessGrid(rows, cols)
        self.worker_endpoints = endpoints
        for endpoint in endpoints:
            self.workers[endpoint.session_rank] = Connection(endpoint.host, endpoint.port)
        return endpoints

    def load_library(self, name: str) -> int:
        reply = self._driver_request(Command.LOAD_LIBRARY, wire.encode_load_library(name))
        lib_id = wire.decode_library_ok(reply.payload)
        self._libs[name] = lib_id
        return lib_id

    def list_workers(self) -> list[wire.WorkerStatus]:
        reply = self._driver_request(Command.LIST_WORKERS)
        return wire.decode_worker_status(reply.payload)

    def create_matrix(
        self,
        m: int,
        n: int,
        pair: layout.DistPair = layout.VC_STAR,
        elem_type: ElemType = ElemType.F64,
    ) -> MatrixHandle:
        reply = self._driver_request(
            Command.CREATE_MATRIX, wire.encode_create_matrix(m, n, pair, elem_type)
        )
        handle, _shapes = wire.decode_create_ok(reply.payload)
        self.handles[handle.id] = handle
        return handle

    def run(self, lib, function: str, args: list) -> list:
        """Invoke a library function; returned matrix handles are registered."""
        lib_id = self._libs[lib] if isinstance(lib, str) else int(lib)
        encoded_args = [arg.ref() if isinstance(arg, MatrixHandle) else arg for arg in args]
        reply = self._driver_request(Command.RUN_TASK, wire.encode_task(lib_id, function, encoded_args))
        values, _ = wire.decode_values(reply.payload)
        for value in values:
            if isinstance(value, MatrixHandle):
                self.handles[value.id] = value
        return values

    # -- data movement ----------------------------------------------------------

    def _require_workers(self) -> layout.ProcessGrid:
        if self.grid is None:
            raise AlchemistError("no workers allocated; call request_workers first")
        return self.grid

    def _send_blocks(self, handle: MatrixHandle, by_rank: dict[int, list[BlockMessage]]) -> None:
        grid = self._require_workers()

        def send_to(rank: int) -> None:
            conn = self.workers[rank]
            complete = None
            for block in by_rank[rank]:
                validate_block_routing(grid, handle, rank, block)
                _, complete = conn.send_block(block, self.buffer_bytes, self.session_id)
            if complete is False:
                raise ProtocolError(f"worker {rank} still incomplete after send")

        ranks = [rank for rank, blocks in by_rank.items() if blocks]
        if not ranks:
            return
        if len(ranks) == 1:
            send_to(ranks[0])
            return
        with ThreadPoolExecutor(max_workers=len(ranks)) as pool:
            for future in [pool.submit(send_to, rank) for rank in ranks]:
                future.result()

    def send_matrix(
        self,
        matrix: np.ndarray,
        pair: layout.DistPair = layout.VC_STAR,
        elem_type: ElemType | None = None,
    ) -> MatrixHandle:
        """Create a distributed matrix and push a dense array into it."""
        grid = self._require_workers()
        matrix = np.asarray(matrix)
        if matrix.ndim != 2:
            raise InvalidSourceError(f"send_matrix needs a 2-D array, got shape {matrix.shape}")
        if elem_type is None:
            elem_type = _elem_type_for(matrix)
        matrix = np.ascontiguousarray(matrix, dtype=elem_type.dtype)
        m, n = matrix.shape
        handle = self.create_matrix(m, n, pair, elem_type)
        by_rank: dict[int, list[BlockMessage]] = {}
        for rank, block in _route_chunk(grid, handle, matrix, 0, 0).items():
            by_rank[rank] = [block]
        self._send_blocks(handle, by_rank)
        return handle

    def send_blocked(self, source: BlockedSource, pair: layout.DistPair = layout.VC_STAR) -> MatrixHandle:
        """Send a chunk-tiled source; every chunk is routed independently."""
        grid = self._require_workers()
        sample = next(iter(source.blocks.values()))
        handle = self.create_matrix(source.m, source.n, pair, _elem_type_for(sample))
        by_rank: dict[int, list[BlockMessage]] = {}
        for (bi, bj) in sorted(source.blocks):
            chunk = np.asarray(source.blocks[(bi, bj)])
            routed = _route_chunk(
                grid, handle, chunk, int(source.row_offsets[bi]), int(source.col_offsets[bj])
            )
            for rank, block in routed.items():
                by_rank.setdefault(rank, []).append(block)
        self._send_blocks(handle, by_rank)
        return handle

    def send_rows(self, source: RowPartitionedSource, pair: layout.DistPair = layout.VC_STAR) -> MatrixHandle:
        """Send a row-partitioned source, one partition at a time."""
        grid = self._require_workers()
        sample = source.partitions[0][1]
        handle = self.create_matrix(source.m, source.n, pair, _elem_type_for(sample))
        by_rank: dict[int, list[BlockMessage]] = {}
        for start, rows in source.partitions:
            for rank, block in _route_chunk(grid, handle, np.asarray(rows), start, 0).items():
                by_rank.setdefault(rank, []).append(block)
        self._send_blocks(handle, by_rank)
        return handle

    def fetch_matrix(self, handle: MatrixHandle) -> np.ndarray:
        """Pull a complete distributed matrix back as a dense array."""
        grid = self._require_workers()
        out = np.empty((handle.m, handle.n), dtype=handle.elem_type.dtype)

        def fetch_from(rank: int) -> None:
            (r0, rstr, rc), (c0, cstr, cc) = layout.local_selection(
                grid, handle.pair, rank, handle.m, handle.n
            )
            if rc == 0 or cc == 0:
                return
            frame = Frame(
                Command.FETCH_BLOCK,
                self.session_id,
                wire.encode_fetch(handle.id, (r0, rstr, rc, c0, cstr, cc)),
            )
            chunks = self.workers[rank].request_chunks(frame, self.buffer_bytes, rc * cc)
            whole = wire.assemble_chunks(chunks)
            values = np.frombuffer(whole.data, dtype=handle.elem_type.dtype).reshape(rc, cc)
            out[r0 :: rstr, c0 :: cstr] = values

        ranks = list(self.workers)
        if len(ranks) == 1:
            fetch_from(ranks[0])
        elif ranks:
            with ThreadPoolExecutor(max_workers=len(ranks)) as pool:
                for future in [pool.submit(fetch_from, rank) for rank in ranks]:
                    future.result()
        return out


def connect(host: str, port: int, buffer_bytes: int = wire.DEFAULT_BUFFER_BYTES) -> ClientSession:
    """Open a session against a running gateway driver."""
    return ClientSession.connect(host, port, buffer_bytes)


def from_address_file(path: str, buffer_bytes: int = wire.DEFAULT_BUFFER_BYTES) -> ClientSession:
    """Open a session using a host:port file written by the gateway."""
    return ClientSession.from_address_file(path, buffer_bytes)
