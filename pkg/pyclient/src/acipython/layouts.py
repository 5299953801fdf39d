"""Client-side layout math from the protocol's ownership semantics.

The gateway stores each matrix element on exactly one worker; to route block
sends the SDK mirrors the documented owner map: grid shape, per-scheme
strides, and each rank's residue in the distributed dimension.
"""
from __future__ import annotations

LEGAL_PAIRS = {
    ("MC", "MR"),
    ("MR", "MC"),
    ("VC", "STAR"),
    ("VR", "STAR"),
    ("STAR", "VC"),
    ("STAR", "VR"),
    ("CIRC", "CIRC"),
}


def normalize_pair(pair) -> tuple[str, str]:
    if isinstance(pair, str):
        cleaned = pair.strip().strip("[]").replace("*", "STAR")
        for sep in (",", "_", " "):
            if sep in cleaned:
                col, _, row = cleaned.partition(sep)
                break
        else:
            raise ValueError(f"cannot parse layout {pair!r}")
        pair = (col.strip().upper(), row.strip().upper())
    else:
        pair = (pair[0].upper(), pair[1].upper())
    if pair not in LEGAL_PAIRS:
        raise ValueError(f"illegal distribution pair {pair}")
    return pair


def grid_shape(workers: int) -> tuple[int, int]:
    """Most-square factorization with rows <= cols."""
    rows = 1
    d = 1
    while d * d <= workers:
        if workers % d == 0:
            rows = d
        d += 1
    return rows, workers // rows


def _dim_stride(scheme: str, rows: int, cols: int) -> int:
    if scheme in ("CIRC", "STAR"):
        return 1
    if scheme == "MC":
        return rows
    if scheme == "MR":
        return cols
    return rows * cols  # VC, VR


def _dim_residue(scheme: str, rows: int, cols: int, rank: int) -> int | None:
    if scheme == "CIRC":
        return 0 if rank == 0 else None
    if scheme == "STAR":
        return 0
    a, b = rank % rows, rank // rows  # column-major placement
    if scheme == "MC":
        return a
    if scheme == "MR":
        return b
    if scheme == "VC":
        return rank
    return a * cols + b  # VR: row-major sweep index


def local_selection(workers: int, pair: tuple[str, str], rank: int, m: int, n: int):
    """((row_start, row_stride, row_count), (col_start, col_stride, col_count)) owned by rank."""
    rows, cols = grid_shape(workers)
    sels = []
    for scheme, extent in ((pair[0], m), (pair[1], n)):
        residue = _dim_residue(scheme, rows, cols, rank)
        stride = _dim_stride(scheme, rows, cols)
        if residue is None or extent <= residue:
            return (0, 1, 0), (0, 1, 0)
        sels.append((residue, stride, (extent - residue + stride - 1) // stride))
    if sels[0][2] == 0 or sels[1][2] == 0:
        return (0, 1, 0), (0, 1, 0)
    return sels[0], sels[1]
