"""Matrix gateway service: one driver endpoint plus N worker endpoints.

The driver (lowest port) owns sessions, worker allocation, the library
registry, and task dispatch; each worker (subsequent ports) owns the local
blocks of the distributed matrices for the sessions it is allocated to.
Clients talk to every endpoint with the frame protocol from ``wire``; matrix
data always flows directly between a client and the worker that owns it.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import socket
import sys
import threading
from dataclasses import dataclass, field

import numpy as np

from . import layout, testlib, wire
from .errors import (
    AlchemistError,
    BadRequestError,
    BufferTooSmallError,
    DecodeError,
    ErrorCode,
    FrameTooLargeError,
    GatewayError,
    GatewayStartupError,
    InvalidArgumentError,
    InvalidLayoutError,
    LibraryNotFoundError,
    NotReadyError,
    OutOfWorkersError,
    OwnershipViolationError,
    RemoteNotLocalError,
    StaleHandleError,
    StaleSessionError,
    VersionMismatchError,
)
from .testlib import SimState
from .wire import (
    BlockMessage,
    Command,
    ElemType,
    Frame,
    MatrixHandle,
    WorkerEndpoint,
    WorkerStatus,
)

DEFAULT_HOST = "127.0.0.1"
_RECV_CHUNK = 1 << 20


# ---------------------------------------------------------------------------
# Worker-local storage


class LocalBlock:
    """One worker's dense block of a distributed matrix, plus fill tracking."""

    __slots__ = ("meta", "row_sel", "col_sel", "array", "filled", "_complete")

    def __init__(self, meta: MatrixHandle, grid: layout.ProcessGrid, session_rank: int):
        self.meta = meta
        self.row_sel, self.col_sel = layout.local_selection(
            grid, meta.pair, session_rank, meta.m, meta.n
        )
        shape = (self.row_sel[2], self.col_sel[2])
        # Uninitialized storage is never observable: reads require completeness.
        self.array = np.empty(shape, dtype=meta.elem_type.dtype)
        self.filled = np.zeros(shape, dtype=bool)
        self._complete = self.array.size == 0

    @property
    def complete(self) -> bool:
        return self._complete

    @property
    def row_indices(self) -> np.ndarray:
        start, stride, count = self.row_sel
        return start + stride * np.arange(count, dtype=np.int64)

    @property
    def col_indices(self) -> np.ndarray:
        start, stride, count = self.col_sel
        return start + stride * np.arange(count, dtype=np.int64)

    def mark_complete(self) -> None:
        self.filled[:] = True
        self._complete = True

    def note_writes(self) -> None:
        if not self._complete:
            self._complete = bool(self.filled.all())


def _local_indices(
    sel: tuple[int, int, int], owned: tuple[int, int, int], extent: int, axis: str
) -> np.ndarray:
    """Local indices for a requested strided index set, or an ownership fault."""
    start, stride, count = sel
    if count == 0:
        return np.empty(0, dtype=np.int64)
    if count > 1 and stride < 1:
        raise InvalidArgumentError(f"{axis} stride must be positive for multi-index selections")
    own_start, own_stride, own_count = owned
    if own_count == 0:
        raise OwnershipViolationError(f"worker owns no {axis} indices of this matrix")
    last = start + stride * (count - 1)
    if last >= extent:
        raise OwnershipViolationError(f"{axis} index {last} outside matrix extent {extent}")
    g = start + stride * np.arange(count, dtype=np.int64)
    if ((g - own_start) % own_stride).any():
        bad = int(g[((g - own_start) % own_stride) != 0][0])
        raise OwnershipViolationError(f"{axis} index {bad} is not owned by this worker")
    return g // own_stride


class WorkerNode:
    """One addressable worker endpoint and its matrix store."""

    def __init__(self, rank: int, host: str):
        self.rank = rank
        self.host = host
        self.port = 0  # assigned at bind
        self.store: dict[tuple[int, int], LocalBlock] = {}
        self.lock = threading.Lock()

    def create_entry(self, session_id: int, meta: MatrixHandle, grid, session_rank: int) -> LocalBlock:
        entry = LocalBlock(meta, grid, session_rank)
        with self.lock:
            self.store[(session_id, meta.id)] = entry
        return entry

    def entry(self, session_id: int, handle_id: int) -> LocalBlock:
        with self.lock:
            entry = self.store.get((session_id, handle_id))
        if entry is None:
            raise StaleHandleError(f"no matrix {handle_id} in session {session_id} on worker {self.rank}")
        return entry

    def drop(self, session_id: int, handle_id: int) -> None:
        with self.lock:
            self.store.pop((session_id, handle_id), None)

    def drop_session(self, session_id: int) -> None:
        with self.lock:
            for key in [k for k in self.store if k[0] == session_id]:
                del self.store[key]

    def flat_write_target(self, session_id: int, block: BlockMessage):
        """Byte view into the stored block for a whole-local-block segment, or None.

        When the selection is exactly this worker's local index set, segment
        elements map 1:1 onto the flat local array, so the payload can be
        received straight into storage. Validation happens here, before any
        element bytes are consumed.
        """
        entry = self.entry(session_id, block.handle_id)
        meta = entry.meta
        if block.elem_type != meta.elem_type:
            raise InvalidArgumentError(
                f"element type {block.elem_type.name} does not match handle ({meta.elem_type.name})"
            )
        sel_rows = (block.row_start, block.row_stride, block.row_count)
        sel_cols = (block.col_start, block.col_stride, block.col_count)
        if sel_rows != entry.row_sel or sel_cols != entry.col_sel:
            return None
        width = meta.elem_type.nbytes
        lo = block.elem_offset
        return entry, memoryview(entry.array).cast("B")[lo * width :]

    def commit_flat_write(self, entry: LocalBlock, elem_offset: int, count: int) -> tuple[int, bool]:
        if count:
            with self.lock:
                entry.filled.reshape(-1)[elem_offset : elem_offset + count] = True
                entry.note_writes()
        return count, entry.complete

    def write_block(self, session_id: int, block: BlockMessage) -> tuple[int, bool]:
        """Write one (possibly partial) block message; atomic validate-then-write."""
        entry = self.entry(session_id, block.handle_id)
        meta = entry.meta
        if block.elem_type != meta.elem_type:
            raise InvalidArgumentError(
                f"element type {block.elem_type.name} does not match handle ({meta.elem_type.name})"
            )
        count = block.elem_count
        sel_rows = (block.row_start, block.row_stride, block.row_count)
        sel_cols = (block.col_start, block.col_stride, block.col_count)
        if sel_rows == entry.row_sel and sel_cols == entry.col_sel:
            # Whole-local-block selection: flat offsets map 1:1 onto the block.
            if count == 0:
                return 0, entry.complete
            values = np.frombuffer(block.data, dtype=meta.elem_type.dtype)
            lo = block.elem_offset
            with self.lock:
                entry.array.reshape(-1)[lo : lo + count] = values
                entry.filled.reshape(-1)[lo : lo + count] = True
                entry.note_writes()
            return count, entry.complete
        li = _local_indices(sel_rows, entry.row_sel, meta.m, "row")
        lj = _local_indices(sel_cols, entry.col_sel, meta.n, "col")
        if count == 0:
            return 0, entry.complete
        values = np.frombuffer(block.data, dtype=meta.elem_type.dtype)
        flat = np.arange(block.elem_offset, block.elem_offset + count, dtype=np.int64)
        rows = li[flat // block.col_count]
        cols = lj[flat % block.col_count]
        with self.lock:
            entry.array[rows, cols] = values
            entry.filled[rows, cols] = True
            entry.note_writes()
        return count, entry.complete

    def read_block(self, session_id: int, handle_id: int, selection) -> BlockMessage:
        """Extract a locally-owned strided selection of a complete handle."""
        entry = self.entry(session_id, handle_id)
        meta = entry.meta
        if not entry.complete:
            raise NotReadyError(f"matrix {handle_id} is not complete on worker {self.rank}")
        rs, rstr, rc, cs, cstr, cc = selection
        if (rs, rstr, rc) == entry.row_sel and (cs, cstr, cc) == entry.col_sel:
            with self.lock:
                data = entry.array.tobytes()
        else:
            try:
                li = _local_indices((rs, rstr, rc), entry.row_sel, meta.m, "row")
                lj = _local_indices((cs, cstr, cc), entry.col_sel, meta.n, "col")
            except OwnershipViolationError as exc:
                raise RemoteNotLocalError(str(exc)) from None
            with self.lock:
                if li.size and lj.size:
                    data = np.ascontiguousarray(entry.array[np.ix_(li, lj)]).tobytes()
                else:
                    data = b""
        return BlockMessage(
            handle_id=handle_id,
            row_start=rs,
            row_stride=rstr,
            row_count=rc,
            col_start=cs,
            col_stride=cstr,
            col_count=cc,
            elem_type=meta.elem_type,
            data=data,
        )


# ---------------------------------------------------------------------------
# Sessions and gateway state


@dataclass
class Session:
    session_id: int
    buffer_bytes: int
    allocated: list[int] = field(default_factory=list)  # gateway ranks by session rank
    grid: layout.ProcessGrid | None = None
    libs: dict[str, int] = field(default_factory=dict)
    lib_names: dict[int, str] = field(default_factory=dict)
    handles: dict[int, MatrixHandle] = field(default_factory=dict)
    next_handle: int = 1
    sim: SimState | None = None
    closed: bool = False

    def session_rank_of(self, gateway_rank: int) -> int:
        try:
            return self.allocated.index(gateway_rank)
        except ValueError:
            raise InvalidArgumentError(
                f"worker {gateway_rank} is not allocated to session {self.session_id}"
            ) from None


class GatewayState:
    """All mutable gateway state; shared by the driver and worker endpoints."""

    def __init__(self, host: str, num_workers: int, max_buffer: int, log: logging.Logger):
        self.host = host
        self.max_buffer = max_buffer
        self.log = log
        self.workers = [WorkerNode(rank, host) for rank in range(num_workers)]
        self.sessions: dict[int, Session] = {}
        self._free = list(range(num_workers))
        self._next_session = 1
        self._lock = threading.RLock()
        self.command_log: list[tuple[str, int]] = []
        self._log_lock = threading.Lock()

    # -- bookkeeping ---------------------------------------------------------

    def record_command(self, endpoint: str, code: int, session_id: int) -> None:
        with self._log_lock:
            self.command_log.append((endpoint, code))
        try:
            name = Command(code).name
        except ValueError:
            name = str(code)
        self.log.info("%s cmd=%s session=%d", endpoint, name, session_id)

    def free_ranks(self) -> list[int]:
        with self._lock:
            return sorted(self._free)

    # -- driver operations ---------------------------------------------------

    def create_session(self, proposed_buffer: int) -> Session:
        if proposed_buffer < wire.MIN_BUFFER_BYTES:
            raise BufferTooSmallError(
                f"proposed buffer {proposed_buffer} below minimum {wire.MIN_BUFFER_BYTES}"
            )
        buffer_bytes = min(proposed_buffer, self.max_buffer)
        with self._lock:
            session = Session(session_id=self._next_session, buffer_bytes=buffer_bytes)
            self._next_session += 1
            self.sessions[session.session_id] = session
        return session

    def get_session(self, session_id: int) -> Session:
        with self._lock:
            session = self.sessions.get(session_id)
        if session is None or session.closed:
            raise StaleSessionError(f"no live session {session_id}")
        return session

    def request_workers(self, session: Session, n: int) -> list[WorkerEndpoint]:
        if n < 1:
            raise InvalidArgumentError(f"must request at least one worker, got {n}")
        if session.grid is not None:
            raise InvalidArgumentError("session already has a worker group")
        with self._lock:
            if len(self._free) < n:
                raise OutOfWorkersError(f"requested {n} workers, only {len(self._free)} free")
            self._free.sort()
            ranks = self._free[:n]
            del self._free[:n]
            session.allocated = ranks
            session.grid = layout.make_grid(n)
        return [
            WorkerEndpoint(srank, grank, self.workers[grank].host, self.workers[grank].port)
            for srank, grank in enumerate(session.allocated)
        ]

    def load_library(self, session: Session, name: str) -> int:
        if name not in testlib.REGISTRY:
            raise LibraryNotFoundError(f"no library named {name!r}")
        if name in session.libs:
            return session.libs[name]
        lib_id = len(session.libs) + 1
        session.libs[name] = lib_id
        session.lib_names[lib_id] = name
        return lib_id

    def create_matrix(
        self, session: Session, m: int, n: int, pair: layout.DistPair, elem_type: ElemType
    ) -> tuple[MatrixHandle, list[tuple[int, int]]]:
        if session.grid is None:
            raise InvalidArgumentError("session has no workers; request workers first")
        with self._lock:
            handle = MatrixHandle(
                id=session.next_handle, m=m, n=n, pair=pair, elem_type=elem_type
            )
            session.next_handle += 1
            session.handles[handle.id] = handle
        shapes = []
        for srank, grank in enumerate(session.allocated):
            entry = self.workers[grank].create_entry(session.session_id, handle, session.grid, srank)
            shapes.append((entry.row_sel[2], entry.col_sel[2]))
        return handle, shapes

    def run_task(self, session: Session, lib_id: int, function: str, args: list) -> list:
        name = session.lib_names.get(lib_id)
        if name is None:
            raise InvalidArgumentError(f"library id {lib_id} is not loaded in this session")
        func = testlib.lookup(name, function)
        return func(TaskContext(self, session), args)

    def close_session(self, session: Session) -> None:
        with self._lock:
            session.closed = True
            self._free.extend(session.allocated)
            self._free.sort()
            freed = session.allocated
            session.allocated = []
            session.handles.clear()
        for grank in freed:
            self.workers[grank].drop_session(session.session_id)

    def worker_status(self) -> list[WorkerStatus]:
        with self._lock:
            owner_of = {}
            for session in self.sessions.values():
                if not session.closed:
                    for grank in session.allocated:
                        owner_of[grank] = session.session_id
        return [
            WorkerStatus(w.rank, w.host, w.port, owner_of.get(w.rank, 0)) for w in self.workers
        ]


class TaskContext:
    """What library functions see: the session's grid plus store plumbing.

    Per-worker data access goes through :meth:`worker_blocks`; whole-matrix
    gather/scatter are the driver-mediated reduction points.
    """

    def __init__(self, state: GatewayState, session: Session):
        self._state = state
        self._session = session

    @property
    def grid(self) -> layout.ProcessGrid:
        return self._session.grid

    def resolve(self, ref: wire.HandleRef) -> MatrixHandle:
        handle = self._session.handles.get(ref.id)
        if handle is None:
            raise StaleHandleError(f"no matrix {ref.id} in session {self._session.session_id}")
        return handle

    def _entries(self, handle: MatrixHandle):
        sid = self._session.session_id
        for srank, grank in enumerate(self._session.allocated):
            yield srank, self._state.workers[grank].entry(sid, handle.id)

    def require_complete(self, handle: MatrixHandle) -> None:
        for _, entry in self._entries(handle):
            if not entry.complete:
                raise NotReadyError(f"matrix {handle.id} is not complete on every worker")

    def worker_blocks(self, handle: MatrixHandle):
        return list(self._entries(handle))

    def allocate(self, m: int, n: int, pair: layout.DistPair, elem_type: ElemType) -> MatrixHandle:
        handle, _ = self._state.create_matrix(self._session, m, n, pair, elem_type)
        return handle

    def free(self, handle: MatrixHandle) -> None:
        self._session.handles.pop(handle.id, None)
        for grank in self._session.allocated:
            self._state.workers[grank].drop(self._session.session_id, handle.id)

    def gather(self, handle: MatrixHandle) -> np.ndarray:
        out = np.zeros((handle.m, handle.n), dtype=handle.elem_type.dtype)
        for _, entry in self._entries(handle):
            if entry.array.size:
                out[np.ix_(entry.row_indices, entry.col_indices)] = entry.array
        return out

    def scatter(self, handle: MatrixHandle, dense: np.ndarray) -> None:
        if dense.shape != (handle.m, handle.n):
            raise InvalidArgumentError(
                f"scatter of {dense.shape} into a {handle.m}x{handle.n} matrix"
            )
        for _, entry in self._entries(handle):
            if entry.array.size:
                entry.array[...] = dense[np.ix_(entry.row_indices, entry.col_indices)]
            entry.mark_complete()

    def write_local(self, handle: MatrixHandle, session_rank: int, values: np.ndarray) -> None:
        grank = self._session.allocated[session_rank]
        entry = self._state.workers[grank].entry(self._session.session_id, handle.id)
        if values.shape != entry.array.shape:
            raise InvalidArgumentError(
                f"local write of {values.shape} into block of {entry.array.shape}"
            )
        entry.array[...] = values
        entry.mark_complete()

    def sim(self) -> SimState:
        if self._session.sim is None:
            self._session.sim = SimState()
        return self._session.sim

    def set_sim(self, sim: SimState) -> None:
        self._session.sim = sim


# ---------------------------------------------------------------------------
# Frame handling


@dataclass
class _BlockStream:
    """A fetch reply: one block streamed as buffer-capped frames."""

    block: BlockMessage
    session_id: int
    buffer_bytes: int

    def send(self, conn: socket.socket) -> None:
        wire.stream_block(conn, self.block, self.buffer_bytes, self.session_id)


def _fault(exc: Exception) -> tuple[int, str]:
    if isinstance(exc, GatewayError):
        return int(exc.code), str(exc)
    if isinstance(exc, InvalidLayoutError):
        return int(ErrorCode.INVALID_LAYOUT), str(exc)
    if isinstance(exc, VersionMismatchError):
        return int(ErrorCode.VERSION_MISMATCH), str(exc)
    if isinstance(exc, FrameTooLargeError):
        return int(ErrorCode.FRAME_TOO_LARGE), str(exc)
    if isinstance(exc, (DecodeError, AlchemistError)):
        return int(ErrorCode.BAD_REQUEST), str(exc)
    return int(ErrorCode.BAD_REQUEST), f"internal error: {exc!r}"


def _error_frame(session_id: int, exc: Exception) -> Frame:
    code, message = _fault(exc)
    return Frame(
        command=Command.ERROR, session_id=session_id, payload=wire.encode_error(code, message)
    )


def _handle_driver_frame(state: GatewayState, frame: Frame) -> list[Frame]:
    command = frame.command
    if command == Command.HANDSHAKE:
        proposed = wire.decode_handshake(frame.payload)
        session = state.create_session(proposed)
        payload = wire.encode_handshake_ok(session.session_id, session.buffer_bytes)
        return [Frame(Command.OK, session.session_id, payload)]
    if command == Command.LIST_WORKERS:
        return [Frame(Command.OK, frame.session_id, wire.encode_worker_status(state.worker_status()))]
    session = state.get_session(frame.session_id)
    if command == Command.REQUEST_WORKERS:
        n = wire.decode_request_workers(frame.payload)
        endpoints = state.request_workers(session, n)
        grid = session.grid
        payload = wire.encode_worker_list(grid.rows, grid.cols, endpoints)
        return [Frame(Command.OK, session.session_id, payload)]
    if command == Command.LOAD_LIBRARY:
        lib_id = state.load_library(session, wire.decode_load_library(frame.payload))
        return [Frame(Command.OK, session.session_id, wire.encode_library_ok(lib_id))]
    if command == Command.CREATE_MATRIX:
        m, n, pair, elem_type = wire.decode_create_matrix(frame.payload)
        handle, shapes = state.create_matrix(session, m, n, pair, elem_type)
        return [Frame(Command.OK, session.session_id, wire.encode_create_ok(handle, shapes))]
    if command == Command.RUN_TASK:
        lib_id, function, args = wire.decode_task(frame.payload)
        results = state.run_task(session, lib_id, function, args)
        return [Frame(Command.OK, session.session_id, wire.encode_values(results))]
    if command == Command.CLOSE_SESSION:
        state.close_session(session)
        return [Frame(Command.OK, session.session_id, b"")]
    raise BadRequestError(f"command {command.name} is not served by the driver")


def _handle_worker_frame(state: GatewayState, worker: WorkerNode, frame: Frame) -> list[Frame]:
    session = state.get_session(frame.session_id)
    session.session_rank_of(worker.rank)  # membership check
    if frame.command == Command.SEND_BLOCK:
        block = wire.decode_block(memoryview(frame.payload))
        if block.handle_id not in session.handles:
            raise StaleHandleError(f"no matrix {block.handle_id} in session {session.session_id}")
        received, complete = worker.write_block(session.session_id, block)
        payload = wire.encode_send_ack(received, complete)
        return [Frame(Command.OK, session.session_id, payload)]
    if frame.command == Command.FETCH_BLOCK:
        handle_id, selection = wire.decode_fetch(frame.payload)
        if handle_id not in session.handles:
            raise StaleHandleError(f"no matrix {handle_id} in session {session.session_id}")
        block = worker.read_block(session.session_id, handle_id, selection)
        return [_BlockStream(block, session.session_id, session.buffer_bytes)]
    raise BadRequestError(f"command {frame.command.name} is not served by workers")


# ---------------------------------------------------------------------------
# Sockets


def _recv_exact(conn: socket.socket, count: int) -> bytes | None:
    chunks = []
    remaining = count
    while remaining:
        try:
            piece = conn.recv(remaining)
        except OSError:
            return None
        if not piece:
            return None
        chunks.append(piece)
        remaining -= len(piece)
    return chunks[0] if len(chunks) == 1 else b"".join(chunks)


def _recv_into(conn: socket.socket, view: memoryview, count: int) -> bool:
    filled = 0
    while filled < count:
        try:
            n = conn.recv_into(view[filled:count], count - filled)
        except OSError:
            return False
        if n == 0:
            return False
        filled += n
    return True


def _drain(conn: socket.socket, count: int) -> bool:
    """Discard ``count`` payload bytes to keep the frame stream in sync."""
    while count:
        try:
            piece = conn.recv(min(count, _RECV_CHUNK))
        except OSError:
            return False
        if not piece:
            return False
        count -= len(piece)
    return True


def _receive_block_streaming(
    state: GatewayState, worker: WorkerNode, conn: socket.socket, session_id: int, payload_len: int
) -> list[Frame] | None:
    """Serve one SEND_BLOCK frame, landing elements directly in storage.

    The 65-byte block metadata is read and fully validated first; for
    whole-local-block selections the element bytes are then received straight
    into the stored array (no intermediate buffer). Completeness is only
    recorded after a successful receive, so a connection dropped mid-payload
    leaves the handle incomplete rather than corrupt. Returns None on EOF.
    """
    meta_raw = _recv_exact(conn, wire.BLOCK_META_SIZE)
    if meta_raw is None:
        return None
    data_len = payload_len - wire.BLOCK_META_SIZE
    try:
        block = wire.decode_block(meta_raw)
        width = block.elem_type.nbytes
        if data_len % width:
            raise DecodeError(f"element bytes ({data_len}) not a multiple of {width}")
        count = data_len // width
        if block.elem_offset + count > block.row_count * block.col_count:
            raise DecodeError("block segment exceeds its selection")
        session = state.get_session(session_id)
        session.session_rank_of(worker.rank)
        if block.handle_id not in session.handles:
            raise StaleHandleError(
                f"no matrix {block.handle_id} in session {session.session_id}"
            )
        target = worker.flat_write_target(session_id, block)
    except Exception as exc:
        if not _drain(conn, data_len):
            return None
        return [_error_frame(session_id, exc)]
    if target is None:
        data = _recv_exact(conn, data_len) if data_len else b""
        if data is None:
            return None
        try:
            received, complete = worker.write_block(
                session_id, dataclasses.replace(block, data=data)
            )
        except Exception as exc:
            return [_error_frame(session_id, exc)]
    else:
        entry, view = target
        if not _recv_into(conn, view, data_len):
            return None
        received, complete = worker.commit_flat_write(entry, block.elem_offset, count)
    payload = wire.encode_send_ack(received, complete)
    return [Frame(Command.OK, session_id, payload)]


class _Endpoint:
    """A listening socket plus per-connection serving threads."""

    def __init__(self, gateway: "Gateway", label: str, sock: socket.socket, handler, block_sink=None):
        self.gateway = gateway
        self.label = label
        self.sock = sock
        self.handler = handler
        self.block_sink = block_sink
        self.thread = threading.Thread(target=self._accept_loop, daemon=True, name=f"accept-{label}")

    def start(self) -> None:
        self.thread.start()

    def _accept_loop(self) -> None:
        # A plain close() does not reliably wake a blocked accept(); poll instead.
        self.sock.settimeout(0.1)
        while not self.gateway.stopping:
            try:
                conn, _ = self.sock.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            conn.setblocking(True)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.gateway._track(conn)
            threading.Thread(
                target=self._serve, args=(conn,), daemon=True, name=f"serve-{self.label}"
            ).start()

    def _serve(self, conn: socket.socket) -> None:
        state = self.gateway.state
        try:
            while True:
                header = _recv_exact(conn, wire.HEADER_SIZE)
                if header is None:
                    return
                version, command_code, session_id, payload_len = wire.parse_header(header)
                if wire.HEADER_SIZE + payload_len > state.max_buffer:
                    wire.write_frame(
                        conn,
                        _error_frame(session_id, FrameTooLargeError("frame exceeds server cap")),
                    )
                    return
                if (
                    self.block_sink is not None
                    and version == wire.PROTOCOL_VERSION
                    and command_code == int(Command.SEND_BLOCK)
                    and payload_len >= wire.BLOCK_META_SIZE
                ):
                    state.record_command(self.label, command_code, session_id)
                    responses = self.block_sink(conn, session_id, payload_len)
                    if responses is None:
                        return
                    buffer_cap = state.max_buffer
                    try:
                        buffer_cap = state.get_session(session_id).buffer_bytes
                    except StaleSessionError:
                        pass
                    for response in responses:
                        wire.write_frame(conn, response, buffer_cap)
                    continue
                payload = _recv_exact(conn, payload_len) if payload_len else b""
                if payload is None:
                    return
                state.record_command(self.label, command_code, session_id)
                try:
                    if version != wire.PROTOCOL_VERSION:
                        raise VersionMismatchError(
                            f"peer version {version}, expected {wire.PROTOCOL_VERSION}"
                        )
                    try:
                        command = Command(command_code)
                    except ValueError:
                        raise DecodeError(f"unknown command code {command_code}") from None
                    frame = Frame(command=command, session_id=session_id, payload=payload)
                    responses = self.handler(frame)
                    buffer_cap = state.max_buffer
                    try:
                        buffer_cap = state.get_session(frame.session_id).buffer_bytes
                    except StaleSessionError:
                        pass
                except Exception as exc:  # fault -> single ERROR frame
                    if not isinstance(exc, AlchemistError):
                        state.log.exception("unexpected failure on %s", self.label)
                    responses = [_error_frame(session_id, exc)]
                    buffer_cap = state.max_buffer
                for response in responses:
                    if isinstance(response, _BlockStream):
                        response.send(conn)
                    else:
                        wire.write_frame(conn, response, buffer_cap)
        finally:
            self.gateway._untrack(conn)
            try:
                conn.close()
            except OSError:
                pass


class Gateway:
    """A running gateway; stop it with :meth:`stop` or a ``with`` block."""

    def __init__(self, state: GatewayState, start_port: int, log_handler=None):
        self.state = state
        self.start_port = start_port
        self._endpoints: list[_Endpoint] = []
        self._conns: set[socket.socket] = set()
        self._conn_lock = threading.Lock()
        self._log_handler = log_handler
        self.stopping = False

    @property
    def host(self) -> str:
        return self.state.host

    @property
    def port(self) -> int:
        return self.start_port

    @property
    def num_workers(self) -> int:
        return len(self.state.workers)

    def worker_endpoints(self) -> list[tuple[int, str, int]]:
        return [(w.rank, w.host, w.port) for w in self.state.workers]

    def _track(self, conn: socket.socket) -> None:
        with self._conn_lock:
            self._conns.add(conn)

    def _untrack(self, conn: socket.socket) -> None:
        with self._conn_lock:
            self._conns.discard(conn)

    def stop(self) -> None:
        if self.stopping:
            return
        self.stopping = True
        for endpoint in self._endpoints:
            endpoint.thread.join(timeout=1.0)
        for endpoint in self._endpoints:
            try:
                endpoint.sock.close()
            except OSError:
                pass
        with self._conn_lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.close()
            except OSError:
                pass
        if self._log_handler is not None:
            self.state.log.removeHandler(self._log_handler)
            self._log_handler.close()

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc_info) -> None:
        self.stop()


def _bind(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
        sock.listen(128)
    except OSError as exc:
        sock.close()
        raise GatewayStartupError(f"cannot bind {host}:{port}: {exc.strerror or exc}") from exc
    return sock


def start(
    num_workers: int,
    start_port: int,
    host: str = DEFAULT_HOST,
    log_path: str | None = None,
    max_buffer: int = wire.DEFAULT_BUFFER_BYTES,
    address_file: str | None = None,
) -> Gateway:
    """Launch a gateway: driver on ``start_port``, worker k on ``start_port+1+k``.

    Fails fast (releasing any partial binds) if a port in the range is taken.
    """
    if num_workers < 1:
        raise GatewayStartupError(f"need at least one worker, got {num_workers}")
    if max_buffer < wire.MIN_BUFFER_BYTES:
        raise GatewayStartupError(f"max buffer {max_buffer} below minimum {wire.MIN_BUFFER_BYTES}")

    log = logging.getLogger(f"alchemist.gateway.{start_port}")
    log.setLevel(logging.INFO)
    log.propagate = False
    handler = logging.FileHandler(log_path) if log_path else logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    log.handlers.clear()
    log.addHandler(handler)

    state = GatewayState(host, num_workers, max_buffer, log)
    sockets: list[socket.socket] = []
    try:
        driver_sock = _bind(host, start_port)
        sockets.append(driver_sock)
        for worker in state.workers:
            worker_sock = _bind(host, start_port + 1 + worker.rank)
            worker.port = worker_sock.getsockname()[1]
            sockets.append(worker_sock)
    except GatewayStartupError:
        for sock in sockets:
            sock.close()
        log.removeHandler(handler)
        handler.close()
        raise

    gateway = Gateway(state, start_port, log_handler=handler)
    gateway._endpoints.append(
        _Endpoint(gateway, "driver", driver_sock, lambda frame: _handle_driver_frame(state, frame))
    )
    for worker, sock in zip(state.workers, sockets[1:]):
        gateway._endpoints.append(
            _Endpoint(
                gateway,
                f"worker-{worker.rank}",
                sock,
                (lambda w: lambda frame: _handle_worker_frame(state, w, frame))(worker),
                block_sink=(
                    lambda w: lambda conn, sid, plen: _receive_block_streaming(
                        state, w, conn, sid, plen
                    )
                )(worker),
            )
        )

    log.info("driver listening on %s:%d (%d workers, buffer cap %d bytes)",
             host, start_port, num_workers, max_buffer)
    for worker in state.workers:
        log.info("worker %d listening on %s:%d", worker.rank, worker.host, worker.port)
    if address_file:
        with open(address_file, "w", encoding="utf-8") as fh:
            fh.write(f"{host}:{start_port}\n")

    for endpoint in gateway._endpoints:
        endpoint.start()
    return gateway


# ---------------------------------------------------------------------------
# CLI


def _parse_size(text: str) -> int:
    cleaned = text.strip().upper()
    for suffix, factor in (("KB", 2**10), ("MB", 2**20), ("GB", 2**30),
                           ("K", 2**10), ("M", 2**20), ("G", 2**30)):
        if cleaned.endswith(suffix):
            return int(float(cleaned[: -len(suffix)]) * factor)
    return int(cleaned)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="alchemistd",
        description="Matrix gateway daemon: driver plus worker endpoints on consecutive ports.",
    )
    parser.add_argument("-p", "--port", type=int, required=True, help="driver port; workers follow")
    parser.add_argument("-n", "--num-workers", type=int, required=True, help="worker endpoint count")
    parser.add_argument("--log", metavar="FILE", default=None, help="write the gateway log to FILE")
    parser.add_argument("--max-buffer", metavar="BYTES", default=str(wire.DEFAULT_BUFFER_BYTES),
                        help="message buffer cap (accepts K/M/G suffixes, default 100M)")
    parser.add_argument("--address-file", metavar="PATH", default=None,
                        help="write the driver host:port to PATH once listening")
    parser.add_argument("--host", default=DEFAULT_HOST, help="interface to bind (default %(default)s)")
    args = parser.parse_args(argv)

    try:
        gateway = start(
            args.num_workers,
            args.port,
            host=args.host,
            log_path=args.log,
            max_buffer=_parse_size(args.max_buffer),
            address_file=args.address_file,
        )
    except (GatewayStartupError, ValueError) as exc:
        print(f"alchemistd: {exc}", file=sys.stderr)
        return 1
    if args.log:
        print(f"alchemistd: driver on {gateway.host}:{gateway.port}, "
              f"{gateway.num_workers} workers on the next ports")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        gateway.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
