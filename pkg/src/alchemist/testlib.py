"""Built-in "testlib" library: truncated SVD, matrix multiply, a toy simulator.

Functions receive a task context (see ``server.TaskContext``) exposing the
calling session's grid, per-worker local blocks, and store plumbing. Compute
stages touch only one worker's local data at a time; the driver performs the
explicit reductions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layout
from .errors import (
    DimensionMismatchError,
    InvalidActionError,
    InvalidArgumentError,
    UnknownFunctionError,
)
from .wire import ElemType, HandleRef

LIBRARY_NAME = "testlib"

# Block power iteration policy for the truncated SVD.
POWER_MAX_ITERS = 300
POWER_TOL = 1e-12
POWER_OVERSAMPLE = 10
_POWER_SEED = 0x5EED_CAFE


@dataclass
class SimState:
    """1-D target-seeking toy simulator, quantized for reproducible scoring.

    The state moves by a clamped action per step. Positions are rounded to
    nine decimals so that decimal-sized actions land exactly on decimal
    targets instead of drifting by float rounding.
    """

    x: float = 0.0
    target: float = 1.0
    step_count: int = 0

    @property
    def score(self) -> float:
        return -abs(self.x - self.target)


def _expect_arity(name: str, args, count: int) -> None:
    if len(args) != count:
        raise InvalidArgumentError(f"{name} expects {count} argument(s), got {len(args)}")


def _expect_handle(name: str, value) -> HandleRef:
    if not isinstance(value, HandleRef):
        raise InvalidArgumentError(f"{name} expects a matrix handle argument")
    return value


def _expect_int(name: str, value) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise InvalidArgumentError(f"{name} expects an integer argument")
    return value


def _expect_float(name: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidArgumentError(f"{name} expects a numeric argument")
    return float(value)


# ---------------------------------------------------------------------------
# Truncated SVD


def _power_iteration(gram: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenpairs of a PSD matrix via oversampled block power iteration.

    Fixed policy: at most POWER_MAX_ITERS sweeps, stopping early once the
    relative residual of the leading-k Ritz pairs drops below POWER_TOL.
    Deterministic for a given matrix shape (seeded start block).
    """
    n = gram.shape[0]
    block = min(k + POWER_OVERSAMPLE, n)
    rng = np.random.default_rng(_POWER_SEED)
    basis, _ = np.linalg.qr(rng.standard_normal((n, block)))
    for _ in range(POWER_MAX_ITERS):
        image = gram @ basis
        small = basis.T @ image
        small = 0.5 * (small + small.T)
        eigvals, eigvecs = np.linalg.eigh(small)
        order = np.argsort(eigvals)[::-1][:k]
        lam = eigvals[order]
        ritz = eigvecs[:, order]
        residual = image @ ritz - (basis @ ritz) * lam
        scale = max(float(np.linalg.norm(lam)), np.finfo(np.float64).tiny)
        basis, _ = np.linalg.qr(image)
        if np.linalg.norm(residual) / scale < POWER_TOL:
            break
    image = gram @ basis
    small = basis.T @ image
    small = 0.5 * (small + small.T)
    eigvals, eigvecs = np.linalg.eigh(small)
    order = np.argsort(eigvals)[::-1][:k]
    lam = np.maximum(eigvals[order], 0.0)
    vectors = basis @ eigvecs[:, order]
    return lam, vectors


def _canonicalize_signs(v: np.ndarray) -> np.ndarray:
    """Flip columns so each column's largest-magnitude entry is non-negative."""
    flips = np.ones(v.shape[1])
    for c in range(v.shape[1]):
        idx = int(np.argmax(np.abs(v[:, c])))
        if v[idx, c] < 0:
            flips[c] = -1.0
    return flips


def truncated_svd(ctx, args) -> list:
    """Rank-k factorization A ~ U diag(S) V^T computed across the workers.

    Each worker reduces its local rows into a Gram contribution; the driver
    sums those, extracts the leading eigenpairs, and the workers materialize
    their local rows of U. Outputs are row-cyclic ([VC,STAR]) handles
    U (m x k), S (k x 1), V (n x k).
    """
    _expect_arity("truncated_svd", args, 2)
    ref = _expect_handle("truncated_svd", args[0])
    k = _expect_int("truncated_svd", args[1])
    meta = ctx.resolve(ref)
    ctx.require_complete(meta)
    m, n = meta.m, meta.n
    if not (1 <= k <= min(m, n)):
        raise InvalidArgumentError(f"rank {k} outside 1..{min(m, n)} for a {m}x{n} matrix")

    source = meta
    temp = None
    if meta.pair != layout.VC_STAR:
        # Gram accumulation needs whole rows per worker; stage a row-cyclic copy.
        temp = ctx.allocate(m, n, layout.VC_STAR, meta.elem_type)
        ctx.scatter(temp, ctx.gather(meta))
        source = temp

    gram = np.zeros((n, n), dtype=np.float64)
    for _, block in ctx.worker_blocks(source):
        if block.array.size:
            local = block.array.astype(np.float64, copy=False)
            gram += local.T @ local

    lam, v = _power_iteration(gram, k)
    sigma = np.sqrt(lam)
    v = v * _canonicalize_signs(v)

    u_meta = ctx.allocate(m, k, layout.VC_STAR, meta.elem_type)
    inv_sigma = np.where(sigma > 0, 1.0 / np.where(sigma > 0, sigma, 1.0), 0.0)
    for rank, block in ctx.worker_blocks(source):
        if block.array.size == 0:
            continue  # rank owns no rows; its U block is empty and already complete
        local = block.array.astype(np.float64, copy=False)
        ctx.write_local(u_meta, rank, (local @ v) * inv_sigma)
    s_meta = ctx.allocate(k, 1, layout.VC_STAR, meta.elem_type)
    ctx.scatter(s_meta, sigma.reshape(k, 1))
    v_meta = ctx.allocate(n, k, layout.VC_STAR, meta.elem_type)
    ctx.scatter(v_meta, v)
    if temp is not None:
        ctx.free(temp)
    return [u_meta, s_meta, v_meta]


def multiply(ctx, args) -> list:
    """C = A @ B; each worker contributes products of its local A elements."""
    _expect_arity("multiply", args, 2)
    a_meta = ctx.resolve(_expect_handle("multiply", args[0]))
    b_meta = ctx.resolve(_expect_handle("multiply", args[1]))
    ctx.require_complete(a_meta)
    ctx.require_complete(b_meta)
    if a_meta.n != b_meta.m:
        raise DimensionMismatchError(
            f"inner dimensions differ: {a_meta.m}x{a_meta.n} times {b_meta.m}x{b_meta.n}"
        )
    b_dense = ctx.gather(b_meta).astype(np.float64, copy=False)
    c = np.zeros((a_meta.m, b_meta.n), dtype=np.float64)
    for _, block in ctx.worker_blocks(a_meta):
        if block.array.size:
            local = block.array.astype(np.float64, copy=False)
            c[block.row_indices, :] += local @ b_dense[block.col_indices, :]
    elem_type = (
        ElemType.F64
        if ElemType.F64 in (a_meta.elem_type, b_meta.elem_type)
        else a_meta.elem_type
    )
    c_meta = ctx.allocate(a_meta.m, b_meta.n, layout.VC_STAR, elem_type)
    ctx.scatter(c_meta, c)
    return [c_meta]


# ---------------------------------------------------------------------------
# Simulator

_ACTION_LIMIT = 0.1
_QUANT_DECIMALS = 9


def sim_reset(ctx, args) -> list:
    _expect_arity("reset", args, 0)
    sim = SimState()
    ctx.set_sim(sim)
    return [sim.x]


def sim_step(ctx, args) -> list:
    _expect_arity("step", args, 1)
    action = _expect_float("step", args[0])
    if not math.isfinite(action):
        raise InvalidActionError(f"action must be finite, got {action!r}")
    sim = ctx.sim()
    clamped = max(-_ACTION_LIMIT, min(_ACTION_LIMIT, action))
    sim.x = round(sim.x + clamped, _QUANT_DECIMALS)
    sim.step_count += 1
    return [sim.x, sim.score]


def sim_get_state(ctx, args) -> list:
    _expect_arity("get_state", args, 0)
    return [ctx.sim().x]


def sim_get_score(ctx, args) -> list:
    _expect_arity("get_score", args, 0)
    return [ctx.sim().score]


FUNCTIONS = {
    "truncated_svd": truncated_svd,
    "multiply": multiply,
    "reset": sim_reset,
    "step": sim_step,
    "get_state": sim_get_state,
    "get_score": sim_get_score,
}

REGISTRY = {LIBRARY_NAME: FUNCTIONS}


def lookup(library: str, function: str):
    functions = REGISTRY.get(library)
    if functions is None or function not in functions:
        raise UnknownFunctionError(f"no function {function!r} in library {library!r}")
    return functions[function]
