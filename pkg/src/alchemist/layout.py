"""Process grids, distribution schemes, ownership maps, and transfer planning.

Pure layout mathematics over immutable values. A distributed m-by-n matrix is
laid out over a 2-D grid of worker ranks; the distribution pair decides, for
every global element (i, j), the single rank that stores it and where it lands
in that rank's local block. ``plan_transfer`` turns a row-partitioned source
plus a layout into per-rank byte, fragment, and message counts without moving
any data.

Ranks are 0-based and placed column-major on the grid: the rank at grid
position (a, b) is ``b * rows + a``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .errors import (
    InvalidBufferError,
    InvalidGridError,
    InvalidLayoutError,
    InvalidPartitioningError,
    NotLocalError,
)

# Fixed wire-frame header overhead; every message buffer loses this many bytes.
# wire.HEADER_SIZE is asserted equal to this constant.
FRAME_HEADER_BYTES = 16


class DistScheme(Enum):
    """How one matrix dimension is spread over the grid.

    CIRC pins the dimension to a single rank, STAR replicates it on every
    rank, MC/MR cycle over a grid column/row, and VC/VR cycle over the whole
    grid in column-major/row-major rank order.
    """

    CIRC = 1
    STAR = 2
    MC = 3
    MR = 4
    VC = 5
    VR = 6


@dataclass(frozen=True)
class ProcessGrid:
    """2-D arrangement of worker ranks with column-major rank placement."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidGridError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def rank_at(self, a: int, b: int) -> int:
        """Rank at grid position (a, b)."""
        if not (0 <= a < self.rows and 0 <= b < self.cols):
            raise InvalidGridError(f"position ({a}, {b}) outside {self.rows}x{self.cols} grid")
        return b * self.rows + a

    def position(self, rank: int) -> tuple[int, int]:
        """Grid position (a, b) of a rank."""
        if not (0 <= rank < self.size):
            raise InvalidGridError(f"rank {rank} outside grid of {self.size}")
        return rank % self.rows, rank // self.rows


def make_grid(p: int, force_rows: int | None = None) -> ProcessGrid:
    """Build the grid for ``p`` workers.

    Defaults to the most-square factorization with rows <= cols; ``force_rows``
    overrides the row count and must divide ``p``.
    """
    if p < 1:
        raise InvalidGridError(f"need at least one worker, got {p}")
    if force_rows is not None:
        if force_rows < 1 or p % force_rows != 0:
            raise InvalidGridError(f"force_rows={force_rows} does not divide {p}")
        return ProcessGrid(force_rows, p // force_rows)
    r = 1
    d = 1
    while d * d <= p:
        if p % d == 0:
            r = d
        d += 1
    return ProcessGrid(r, p // r)


@dataclass(frozen=True)
class DistPair:
    """(column-scheme, row-scheme) layout tag; only non-redundant pairs are legal.

    The column scheme distributes row indices i, the row scheme distributes
    column indices j.
    """

    col_scheme: DistScheme
    row_scheme: DistScheme

    def __post_init__(self):
        if (self.col_scheme, self.row_scheme) not in _LEGAL:
            raise InvalidLayoutError(
                f"[{self.col_scheme.name},{self.row_scheme.name}] is not a legal layout"
            )

    @property
    def label(self) -> str:
        return f"{self.col_scheme.name}_{self.row_scheme.name}"

    def __str__(self) -> str:
        return f"[{self.col_scheme.name},{self.row_scheme.name}]"

    @classmethod
    def parse(cls, text: str) -> "DistPair":
        """Parse "VC_STAR", "[VC,STAR]", "vc,star", etc."""
        cleaned = text.strip().strip("[]").replace("*", "STAR")
        for sep in (",", "_", " "):
            if sep in cleaned:
                left, _, right = cleaned.partition(sep)
                break
        else:
            raise InvalidLayoutError(f"cannot parse layout {text!r}")
        try:
            return cls(DistScheme[left.strip().upper()], DistScheme[right.strip().upper()])
        except KeyError as exc:
            raise InvalidLayoutError(f"unknown scheme in {text!r}") from exc


_LEGAL = frozenset(
    {
        (DistScheme.MC, DistScheme.MR),
        (DistScheme.MR, DistScheme.MC),
        (DistScheme.VC, DistScheme.STAR),
        (DistScheme.VR, DistScheme.STAR),
        (DistScheme.STAR, DistScheme.VC),
        (DistScheme.STAR, DistScheme.VR),
        (DistScheme.CIRC, DistScheme.CIRC),
    }
)

MC_MR = DistPair(DistScheme.MC, DistScheme.MR)
MR_MC = DistPair(DistScheme.MR, DistScheme.MC)
VC_STAR = DistPair(DistScheme.VC, DistScheme.STAR)
VR_STAR = DistPair(DistScheme.VR, DistScheme.STAR)
STAR_VC = DistPair(DistScheme.STAR, DistScheme.VC)
STAR_VR = DistPair(DistScheme.STAR, DistScheme.VR)
CIRC_CIRC = DistPair(DistScheme.CIRC, DistScheme.CIRC)

ALL_PAIRS: tuple[DistPair, ...] = (MC_MR, MR_MC, VC_STAR, VR_STAR, STAR_VC, STAR_VR, CIRC_CIRC)


@dataclass(frozen=True)
class LocalCoord:
    """Where a global element lives: owning rank plus local (li, lj) indices."""

    rank: int
    li: int
    lj: int


def _stride(scheme: DistScheme, grid: ProcessGrid) -> int:
    """Index stride between consecutive locally-owned global indices."""
    if scheme in (DistScheme.CIRC, DistScheme.STAR):
        return 1
    if scheme is DistScheme.MC:
        return grid.rows
    if scheme is DistScheme.MR:
        return grid.cols
    return grid.size  # VC, VR


def _residue(scheme: DistScheme, grid: ProcessGrid, rank: int) -> int | None:
    """Residue class (mod stride) owned by ``rank``, or None if it owns nothing."""
    if scheme is DistScheme.CIRC:
        return 0 if rank == 0 else None
    if scheme is DistScheme.STAR:
        return 0
    a, b = grid.position(rank)
    if scheme is DistScheme.MC:
        return a
    if scheme is DistScheme.MR:
        return b
    if scheme is DistScheme.VC:
        return rank
    return a * grid.cols + b  # VR: row-major index of the rank's position


def owner(grid: ProcessGrid, pair: DistPair, i, j):
    """Rank owning global element (i, j). Accepts ints or numpy index arrays."""
    if np.any(np.asarray(i) < 0) or np.any(np.asarray(j) < 0):
        raise ValueError("indices must be non-negative")
    r, c, p = grid.rows, grid.cols, grid.size
    cs, rs = pair.col_scheme, pair.row_scheme
    if cs is DistScheme.MC:  # [MC,MR]
        out = (j % c) * r + (i % r)
    elif cs is DistScheme.MR:  # [MR,MC]
        out = (i % c) * r + (j % r)
    elif cs is DistScheme.VC:  # [VC,STAR]
        out = i % p
    elif cs is DistScheme.VR:  # [VR,STAR]: row-major position of i mod p
        k = i % p
        out = (k % c) * r + (k // c)
    elif rs is DistScheme.VC:  # [STAR,VC]
        out = j % p
    elif rs is DistScheme.VR:  # [STAR,VR]
        k = j % p
        out = (k % c) * r + (k // c)
    else:  # [CIRC,CIRC]
        out = i * 0 + j * 0
    if isinstance(out, np.ndarray):
        return out
    return int(out)


def local_of(grid: ProcessGrid, pair: DistPair, i: int, j: int) -> LocalCoord:
    """Map a global coordinate to (owning rank, local indices)."""
    rank = owner(grid, pair, i, j)
    li = i // _stride(pair.col_scheme, grid)
    lj = j // _stride(pair.row_scheme, grid)
    return LocalCoord(rank, li, lj)


def global_of(grid: ProcessGrid, pair: DistPair, rank: int, li: int, lj: int) -> tuple[int, int]:
    """Inverse of :func:`local_of` for a locally valid (li, lj) on ``rank``."""
    if li < 0 or lj < 0:
        raise NotLocalError(f"local indices must be non-negative, got ({li}, {lj})")
    oi = _residue(pair.col_scheme, grid, rank)
    oj = _residue(pair.row_scheme, grid, rank)
    if oi is None or oj is None:
        raise NotLocalError(f"rank {rank} owns no elements under {pair}")
    i = oi + li * _stride(pair.col_scheme, grid)
    j = oj + lj * _stride(pair.row_scheme, grid)
    return i, j


def _dim_count(scheme: DistScheme, grid: ProcessGrid, rank: int, extent: int) -> int:
    o = _residue(scheme, grid, rank)
    if o is None or extent <= o:
        return 0
    s = _stride(scheme, grid)
    return (extent - o + s - 1) // s


def local_shape(grid: ProcessGrid, pair: DistPair, rank: int, m: int, n: int) -> tuple[int, int]:
    """(local rows, local cols) of rank's block of an m-by-n matrix."""
    if m < 0 or n < 0:
        raise ValueError(f"negative matrix dims {m}x{n}")
    lr = _dim_count(pair.col_scheme, grid, rank, m)
    lc = _dim_count(pair.row_scheme, grid, rank, n)
    if lr == 0 or lc == 0:
        return 0, 0
    return lr, lc


def local_selection(
    grid: ProcessGrid, pair: DistPair, rank: int, m: int, n: int
) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Strided (start, stride, count) index sets of rank's block, per dimension.

    Counts are both zero when the rank owns nothing.
    """
    lr, lc = local_shape(grid, pair, rank, m, n)
    if lr == 0 or lc == 0:
        return (0, 1, 0), (0, 1, 0)
    oi = _residue(pair.col_scheme, grid, rank)
    oj = _residue(pair.row_scheme, grid, rank)
    return (oi, _stride(pair.col_scheme, grid), lr), (oj, _stride(pair.row_scheme, grid), lc)


# ---------------------------------------------------------------------------
# Transfer planning


@dataclass(frozen=True)
class PlanEntry:
    """Traffic from one source partition to one rank."""

    partition: int
    rank: int
    nbytes: int
    fragments: int
    messages: int


@dataclass(frozen=True)
class TransferPlan:
    """Per (partition, rank) byte/fragment/message counts for a planned send.

    A fragment is a maximal run of consecutive same-owner elements within one
    source row under row-major traversal; messages assume each one carries at
    most ``buffer_bytes - frame header`` payload bytes.
    """

    entries: tuple[PlanEntry, ...]
    total_bytes: int
    total_fragments: int
    total_messages: int


def _normalize_partitioning(partitioning: Iterable, m: int) -> list[tuple[int, int]]:
    ranges = []
    for item in partitioning:
        if isinstance(item, range):
            if item.step != 1:
                raise InvalidPartitioningError("row ranges must have step 1")
            start, stop = item.start, item.stop
        else:
            start, stop = item
        start, stop = int(start), int(stop)
        if start < 0 or stop < start:
            raise InvalidPartitioningError(f"bad row range ({start}, {stop})")
        ranges.append((start, stop))
    order = sorted(range(len(ranges)), key=lambda ix: ranges[ix])
    cursor = 0
    for ix in order:
        start, stop = ranges[ix]
        if start != cursor and start != stop:  # zero-width ranges may sit anywhere
            kind = "overlap" if start < cursor else "gap"
            raise InvalidPartitioningError(f"partitioning has a {kind} at row {min(start, cursor)}")
        cursor = max(cursor, stop)
    if cursor != m:
        raise InvalidPartitioningError(f"partitioning covers rows up to {cursor}, matrix has {m}")
    return ranges


def _rows_with_residue(start: int, stop: int, res: int, mod: int) -> int:
    """Count of i in [start, stop) with i % mod == res."""

    def below(x: int) -> int:
        return 0 if x <= res else (x - res + mod - 1) // mod

    return below(stop) - below(start)


def plan_transfer(
    partitioning: Iterable,
    grid: ProcessGrid,
    pair: DistPair,
    m: int,
    n: int,
    elem_bytes: int,
    buffer_bytes: int,
    header_bytes: int = FRAME_HEADER_BYTES,
) -> TransferPlan:
    """Plan a send of an m-by-n matrix from row partitions onto a layout.

    ``partitioning`` is a list of contiguous half-open row ranges (tuples or
    ``range`` objects) that must cover 0..m-1 without overlap. Only entries
    with a positive byte count are emitted.
    """
    if elem_bytes < 1:
        raise ValueError(f"elem_bytes must be positive, got {elem_bytes}")
    if buffer_bytes <= header_bytes:
        raise InvalidBufferError(
            f"buffer of {buffer_bytes} bytes cannot exceed the {header_bytes}-byte header"
        )
    ranges = _normalize_partitioning(partitioning, m)
    usable = buffer_bytes - header_bytes
    p = grid.size

    # Row ownership patterns repeat with period p in i (r and c both divide p).
    js = np.arange(n, dtype=np.int64)
    elems_by_residue = np.zeros((p, p), dtype=np.int64)  # [i % p, rank] -> elements/row
    frags_by_residue = np.zeros((p, p), dtype=np.int64)
    for res in range(p):
        if n == 0:
            break
        owners = np.broadcast_to(
            np.asarray(owner(grid, pair, np.int64(res), js), dtype=np.int64), (n,)
        )
        elems_by_residue[res] = np.bincount(owners, minlength=p)
        run_starts = np.ones(n, dtype=bool)
        run_starts[1:] = owners[1:] != owners[:-1]
        frags_by_residue[res] = np.bincount(owners[run_starts], minlength=p)

    entries = []
    for pid, (start, stop) in enumerate(ranges):
        elems = np.zeros(p, dtype=np.int64)
        frags = np.zeros(p, dtype=np.int64)
        for res in range(p):
            nrows = _rows_with_residue(start, stop, res, p)
            if nrows:
                elems += nrows * elems_by_residue[res]
                frags += nrows * frags_by_residue[res]
        for rank in range(p):
            if elems[rank] == 0:
                continue
            nbytes = int(elems[rank]) * elem_bytes
            entries.append(
                PlanEntry(
                    partition=pid,
                    rank=rank,
                    nbytes=nbytes,
                    fragments=int(frags[rank]),
                    messages=-(-nbytes // usable),
                )
            )
    return TransferPlan(
        entries=tuple(entries),
        total_bytes=sum(e.nbytes for e in entries),
        total_fragments=sum(e.fragments for e in entries),
        total_messages=sum(e.messages for e in entries),
    )
