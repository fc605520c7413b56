"""Float32 kernels with a fixed accumulation order.

Everything here is written as explicit loops compiled with numba instead of
delegating to BLAS. The engine's sparse and dense attention paths are
compared bit for bit in tests, which only works if matmul accumulates in one
documented order (ascending inner index, one accumulator per output element)
no matter how many threads run. BLAS libraries reorder and block their
reductions, so they are out.

numpy elementwise ufuncs and axis reductions (sum, mean, max) are still used
freely: they are single-threaded and their pairwise reduction tree depends
only on the operand shape, so results are reproducible across runs and
machines with the same numpy build.

Thread count is configurable via FOCUS_THREADS; results do not depend on it
because every output element is owned by exactly one thread.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np
from numba import config as _nb_config
from numba import njit, prange, set_num_threads

from .errors import ConfigError, DegenerateAttentionError, ShapeError

THREADS_ENV = "FOCUS_THREADS"

# workqueue is always available and fork-safe; avoids the optional TBB layer.
_nb_config.THREADING_LAYER = "workqueue"

# Additive bias injected into matmul outputs; used only by the CLI selftest
# to prove the checks can fail. Never set this in library code.
_fault_bias = 0.0


def set_fault_bias(value: float) -> None:
    global _fault_bias
    _fault_bias = float(value)


def configure_threads(n: int | None = None) -> int:
    """Set the kernel thread count and return the value actually applied.

    ``n=None`` reads FOCUS_THREADS (default 1). Requests above the number of
    threads numba reserved at import are capped rather than rejected, so the
    same command line works on any machine.
    """
    if n is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(raw)
        except ValueError as exc:
            raise ShapeError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ShapeError(f"thread count must be >= 1, got {n}")
    applied = min(n, _nb_config.NUMBA_NUM_THREADS)
    set_num_threads(applied)
    return applied


def _as_f32_2d(x: np.ndarray, name: str) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return x


@njit(parallel=True, fastmath=False, cache=True)
def _mm(a, b, out):  # pragma: no cover - compiled
    m, k = a.shape
    n = b.shape[1]
    for i in prange(m):
        for j in range(n):
            out[i, j] = np.float32(0.0)
        for t in range(k):
            v = a[i, t]
            for j in range(n):
                out[i, j] += v * b[t, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float32 matrix product with ascending-k accumulation per output element.

    Each out[i, j] is a single float32 accumulator updated in order
    k = 0, 1, ..., K-1. The result is bitwise reproducible across runs and
    thread counts.
    """
    a = _as_f32_2d(a, "a")
    b = _as_f32_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float32)
    _mm(a, b, out)
    if _fault_bias != 0.0:
        out += np.float32(_fault_bias)
    return out


# --- softmax ---------------------------------------------------------------

# When active, every row_softmax call appends (shape, max deviation) for rows
# whose sum drifts from 1 by more than tol. Used by the numerical-health check.
_softmax_watch: list[tuple[float, list]] = []


@contextmanager
def softmax_sum_check(tol: float = 1e-5):
    """Collect softmax rows whose post-normalization sum deviates from 1.

    Yields a list of (shape, deviation) tuples; empty means every softmax
    computed inside the block was healthy.
    """
    violations: list[tuple[tuple[int, ...], float]] = []
    _softmax_watch.append((float(tol), violations))
    try:
        yield violations
    finally:
        _softmax_watch.pop()


def row_softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float32 with max subtraction.

    Rows must be non-empty: softmax over zero items has no value and the
    caller is asking for attention over an empty context.
    """
    x = _as_f32_2d(x, "x")
    if x.shape[1] == 0:
        raise DegenerateAttentionError("softmax over an empty row")
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=1, keepdims=True)
    out = e / s
    if _softmax_watch:
        sums = np.sum(out, axis=1, dtype=np.float32)
        dev = float(np.max(np.abs(sums - np.float32(1.0))))
        for tol, sink in _softmax_watch:
            if dev > tol:
                sink.append((x.shape, dev))
    return out


# --- rms norm ---------------------------------------------------------------


@njit(parallel=True, fastmath=False, cache=True)
def _rms_rows(x, gain, eps, out):  # pragma: no cover - compiled
    m, n = x.shape
    for i in prange(m):
        ss = np.float32(0.0)
        for j in range(n):
            ss += x[i, j] * x[i, j]
        denom = np.float32(1.0) / np.float32(math.sqrt(ss / np.float32(n) + eps))
        for j in range(n):
            out[i, j] = x[i, j] * denom * gain[j]
    return out


def rms_norm_rows(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Root-mean-square normalization of each row, scaled by a per-column gain."""
    x = _as_f32_2d(x, "x")
    gain = np.ascontiguousarray(gain, dtype=np.float32)
    if gain.ndim != 1 or gain.shape[0] != x.shape[1]:
        raise ShapeError(f"gain shape {gain.shape} does not match rows of {x.shape}")
    if eps < 0:
        raise ShapeError(f"eps must be >= 0, got {eps}")
    out = np.empty_like(x)
    _rms_rows(x, gain, np.float32(eps), out)
    return out


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """RMS-normalize a single vector."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise ShapeError(f"x must be 1-D, got shape {x.shape}")
    return rms_norm_rows(x.reshape(1, -1), gain, eps)[0]


# --- rotary embedding -------------------------------------------------------


@njit(parallel=True, fastmath=False, cache=True)
def _rope(x, pos, inv_freq, out):  # pragma: no cover - compiled
    heads, n, d = x.shape
    half = d // 2
    for h in prange(heads):
        for p in range(n):
            for i in range(half):
                ang = pos[p] * inv_freq[i]
                c = np.float32(math.cos(ang))
                s = np.float32(math.sin(ang))
                a = x[h, p, i]
                b = x[h, p, i + half]
                out[h, p, i] = a * c - b * s
                out[h, p, i + half] = a * s + b * c


def rope(x: np.ndarray, position_ids: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Rotary position embedding over (heads, positions, head_dim).

    Dimension pairs are (i, i + head_dim/2). Angles are computed in float64
    (position * base**(-2i/head_dim)) and the rotation is applied in float32.
    Output depends on positions only through ``position_ids``.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ShapeError(f"x must be (heads, positions, head_dim), got {x.shape}")
    d = x.shape[2]
    if d % 2 != 0:
        raise ConfigError(f"head_dim must be even, got {d}")
    pos = np.ascontiguousarray(position_ids, dtype=np.float64)
    if pos.ndim != 1 or pos.shape[0] != x.shape[1]:
        raise ShapeError(f"position_ids shape {pos.shape} does not match {x.shape}")
    inv_freq = base ** (-2.0 * np.arange(d // 2, dtype=np.float64) / d)
    out = np.empty_like(x)
    _rope(x, pos, inv_freq, out)
    return out


# --- misc elementwise -------------------------------------------------------


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x) in float32."""
    x = np.asarray(x, dtype=np.float32)
    return x / (np.float32(1.0) + np.exp(-x))


def gather_rows(x: np.ndarray, indices) -> np.ndarray:
    """Copy the given rows out of a 2-D array, preserving the index order."""
    x = _as_f32_2d(x, "x")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"row index out of range for {x.shape[0]} rows")
    return x[idx].copy()


def scatter_rows(dst: np.ndarray, indices, src: np.ndarray) -> None:
    """Write src rows into dst at the given positions, in place."""
    if dst.ndim != 2:
        raise ShapeError("dst must be 2-D")
    idx = np.asarray(indices, dtype=np.int64)
    src = np.asarray(src, dtype=np.float32)
    if src.shape != (idx.size, dst.shape[1]):
        raise ShapeError(f"src shape {src.shape} does not match {idx.size} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= dst.shape[0]):
        raise ShapeError(f"row index out of range for {dst.shape[0]} rows")
    dst[idx] = src


# --- attention --------------------------------------------------------------


def attend(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    return_probs: bool = False,
):
    """Multi-head scaled dot-product attention without any masking.

    q is (heads, A, d); k and v are (heads, C, d) over the same context. The
    score matmul, the softmax, and the value matmul all run through the
    fixed-order kernels above, so two calls with identical inputs produce
    bitwise identical outputs. Raises if the context is empty.
    """
    q = np.ascontiguousarray(q, dtype=np.float32)
    k = np.ascontiguousarray(k, dtype=np.float32)
    v = np.ascontiguousarray(v, dtype=np.float32)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("q, k, v must be 3-D (heads, rows, head_dim)")
    if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"incompatible attention shapes {q.shape}, {k.shape}, {v.shape}")
    heads, rows, d = q.shape
    ctx = k.shape[1]
    if ctx == 0:
        raise DegenerateAttentionError("attention over an empty context")
    scale = np.float32(1.0 / math.sqrt(d))
    out = np.empty((heads, rows, d), dtype=np.float32)
    probs_all = np.empty((heads, rows, ctx), dtype=np.float32) if return_probs else None
    for h in range(heads):
        kt = np.ascontiguousarray(k[h].T)
        scores = matmul(q[h], kt)
        scores *= scale
        probs = row_softmax(scores)
        out[h] = matmul(probs, v[h])
        if probs_all is not None:
            probs_all[h] = probs
    if return_probs:
        return out, probs_all
    return out
