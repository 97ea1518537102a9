"""Masked attention: a dense 64-bit reference and a cache-tiled kernel.

The tiled kernel streams key tiles through an online softmax, skipping any
(query tile, key tile) pair the block structure disallows outright and
applying an element mask on tiles that straddle block boundaries. Backward
recomputes attention probabilities from the saved inputs and per-row
log-sum-exp statistics instead of storing the N x N probability matrix.

Traversal order is fixed (query tiles outer, key tiles left to right), so
outputs and gradients are bit-identical across runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attnmask import AttentionMask, BLOCK_CAUSAL, BLOCK_DIAGONAL, DENSE, build_mask
from .common import InvalidArgument, InvalidState
from .schedule import ScaleSchedule

_SKIP, _FULL, _PARTIAL = 0, 1, 2


@dataclass
class TileCounter:
    """Instrumentation: tile pairs visited/skipped and score-cell accounting."""

    visited: int = 0
    skipped: int = 0
    cells: int = 0  # total query x key cells in visited tiles (padding included)

    def flops(self, head_dim: int, heads: int = 1) -> int:
        # 2 mul-adds per cell per channel for scores, same again for values.
        return 4 * self.cells * head_dim * heads


@dataclass
class SavedAttention:
    """Forward state the backward pass needs: inputs plus row statistics."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    out: np.ndarray
    lse: np.ndarray  # [heads, N] log-sum-exp of masked scaled scores
    mask: AttentionMask
    scale: float
    tile: int
    consumed: bool = False


def _check_inputs(q, k, v, mask):
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise InvalidArgument(f"q/k/v must share a [heads, N, d] shape, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != mask.seq_len:
        raise InvalidArgument(f"mask covers {mask.seq_len} positions, inputs have {q.shape[1]}")


def _tiles(n: int, tile: int):
    return [(a, min(a + tile, n)) for a in range(0, n, tile)]


def _classify(mask: AttentionMask, qa, qb, ka, kb) -> int:
    """Whole-tile relation to the mask, from block ids at the tile corners."""
    if mask.kind == DENSE:
        return _FULL
    bid = mask.block_ids
    q0, q1 = bid[qa], bid[qb - 1]
    k0, k1 = bid[ka], bid[kb - 1]
    if mask.kind == BLOCK_DIAGONAL:
        if q1 < k0 or k1 < q0:
            return _SKIP
        return _FULL if q0 == q1 == k0 == k1 else _PARTIAL
    if q1 < k0:
        return _SKIP
    return _FULL if k1 <= q0 else _PARTIAL


def count_visited_tiles(mask: AttentionMask, tile: int) -> tuple[int, int]:
    """(visited, total) tile pairs for the kernel's traversal at this tile size."""
    n = mask.seq_len
    qt = _tiles(n, tile)
    visited = 0
    for qa, qb in qt:
        for ka, kb in qt:
            if _classify(mask, qa, qb, ka, kb) != _SKIP:
                visited += 1
    return visited, len(qt) ** 2


def dense_attention(q, k, v, mask: AttentionMask, scale: float | None = None) -> np.ndarray:
    """Reference path: materialize scores, mask with -inf, softmax, mix values.

    Always computes in 64-bit internally; returns the input dtype.
    """
    _check_inputs(q, k, v, mask)
    d = q.shape[2]
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    q64 = q.astype(np.float64, copy=False)
    k64 = k.astype(np.float64, copy=False)
    v64 = v.astype(np.float64, copy=False)
    scores = np.einsum("hnd,hmd->hnm", q64, k64) * scale
    allowed = mask.element_mask(0, mask.seq_len, 0, mask.seq_len)
    scores = np.where(allowed[None, :, :], scores, -np.inf)
    m = scores.max(axis=2, keepdims=True)
    p = np.exp(scores - m)
    p /= p.sum(axis=2, keepdims=True)
    out = np.einsum("hnm,hmd->hnd", p, v64)
    return out.astype(q.dtype, copy=False)


def tiled_attention(
    q,
    k,
    v,
    mask: AttentionMask,
    scale: float | None = None,
    tile: int = 64,
    counter: TileCounter | None = None,
) -> tuple[np.ndarray, SavedAttention]:
    """Tiled forward pass; returns the output and state for the backward pass."""
    _check_inputs(q, k, v, mask)
    if tile < 1:
        raise InvalidArgument(f"tile size must be >= 1, got {tile}")
    heads, n, d = q.shape
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    out = np.empty_like(q)
    lse = np.empty((heads, n), dtype=q.dtype)
    ranges = _tiles(n, tile)
    neg_inf = -np.inf
    for qa, qb in ranges:
        qt = q[:, qa:qb]
        m = np.full((heads, qb - qa), neg_inf, dtype=q.dtype)
        l = np.zeros((heads, qb - qa), dtype=q.dtype)
        o = np.zeros((heads, qb - qa, d), dtype=q.dtype)
        for ka, kb in ranges:
            rel = _classify(mask, qa, qb, ka, kb)
            if rel == _SKIP:
                if counter is not None:
                    counter.skipped += 1
                continue
            if counter is not None:
                counter.visited += 1
                counter.cells += (qb - qa) * (kb - ka)
            s = np.einsum("hqd,hkd->hqk", qt, k[:, ka:kb]) * scale
            if rel == _PARTIAL:
                s = np.where(mask.element_mask(qa, qb, ka, kb)[None], s, neg_inf)
            tile_max = s.max(axis=2)
            m_new = np.maximum(m, tile_max)
            finite = m_new != neg_inf
            with np.errstate(invalid="ignore"):
                p = np.where(finite[:, :, None], np.exp(s - m_new[:, :, None]), 0.0)
                alpha = np.where(m != neg_inf, np.exp(m - m_new), 0.0)
            l = l * alpha + p.sum(axis=2)
            o = o * alpha[:, :, None] + np.einsum("hqk,hkd->hqd", p, v[:, ka:kb])
            m = m_new
        out[:, qa:qb] = o / l[:, :, None]
        lse[:, qa:qb] = m + np.log(l)
    saved = SavedAttention(q=q, k=k, v=v, out=out, lse=lse, mask=mask, scale=scale, tile=tile)
    return out, saved


def tiled_attention_backward(
    saved: SavedAttention, d_out: np.ndarray, counter: TileCounter | None = None
):
    """Gradients (dq, dk, dv); probabilities recomputed tile by tile."""
    if saved.consumed:
        raise InvalidState("attention backward state already consumed")
    saved.consumed = True
    q, k, v, mask, scale, tile = saved.q, saved.k, saved.v, saved.mask, saved.scale, saved.tile
    if d_out.shape != q.shape:
        raise InvalidArgument(f"d_out shape {d_out.shape} does not match {q.shape}")
    n = q.shape[1]
    delta = np.einsum("hnd,hnd->hn", d_out, saved.out)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    ranges = _tiles(n, tile)
    for qa, qb in ranges:
        qt = q[:, qa:qb]
        dot = d_out[:, qa:qb]
        lse_t = saved.lse[:, qa:qb, None]
        delta_t = delta[:, qa:qb, None]
        for ka, kb in ranges:
            rel = _classify(mask, qa, qb, ka, kb)
            if rel == _SKIP:
                continue
            if counter is not None:
                counter.visited += 1
                counter.cells += (qb - qa) * (kb - ka)
            s = np.einsum("hqd,hkd->hqk", qt, k[:, ka:kb]) * scale
            if rel == _PARTIAL:
                s = np.where(mask.element_mask(qa, qb, ka, kb)[None], s, -np.inf)
            p = np.exp(s - lse_t)
            dv[:, ka:kb] += np.einsum("hqk,hqd->hkd", p, dot)
            dp = np.einsum("hqd,hkd->hqk", dot, v[:, ka:kb])
            ds = p * (dp - delta_t)
            dq[:, qa:qb] += np.einsum("hqk,hkd->hqd", ds, k[:, ka:kb]) * scale
            dk[:, ka:kb] += np.einsum("hqk,hqd->hkd", ds, qt) * scale
    return dq, dk, dv


def bench_attention(
    schedules: list[tuple[str, ScaleSchedule]],
    kinds: list[str],
    repeats: int = 25,
    tile: int = 64,
    heads: int = 4,
    head_dim: int = 64,
    dtype=np.float32,
    seed: int = 0,
    warmup: int = 3,
) -> list[dict]:
    """Wall-clock comparison of the tiled kernel against the dense reference.

    Per schedule: times the dense reference once, then the tiled kernel for
    each requested mask kind on the same inputs. Reports mean and p50 over
    `repeats` timed runs (warm-up runs excluded).
    """
    if repeats < 3:
        raise InvalidArgument(f"repeats must be >= 3, got {repeats}")
    from .common import substream

    rng = substream(seed, "bench")
    rows = []
    for name, sched in schedules:
        n = sched.total_tokens
        q = rng.standard_normal((heads, n, head_dim)).astype(dtype)
        k = rng.standard_normal((heads, n, head_dim)).astype(dtype)
        v = rng.standard_normal((heads, n, head_dim)).astype(dtype)
        dense_mask = build_mask(sched, DENSE)

        def time_fn(fn):
            for _ in range(warmup):
                fn()
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                samples.append((time.perf_counter() - t0) * 1e3)
            arr = np.array(samples)
            return float(arr.mean()), float(np.percentile(arr, 50))

        dense_mean, dense_p50 = time_fn(lambda: dense_attention(q, k, v, dense_mask))
        rows.append(
            {
                "schedule": name,
                "impl": "dense-reference",
                "kind": DENSE,
                "seq_len": n,
                "tile": tile,
                "heads": heads,
                "head_dim": head_dim,
                "mean_ms": dense_mean,
                "p50_ms": dense_p50,
                "speedup_vs_dense": 1.0,
            }
        )
        for kind in kinds:
            msk = build_mask(sched, kind)
            counter = TileCounter()
            tiled_attention(q, k, v, msk, tile=tile, counter=counter)
            mean_ms, p50 = time_fn(lambda: tiled_attention(q, k, v, msk, tile=tile))
            rows.append(
                {
                    "schedule": name,
                    "impl": "tiled",
                    "kind": kind,
                    "seq_len": n,
                    "tile": tile,
                    "heads": heads,
                    "head_dim": head_dim,
                    "mean_ms": mean_ms,
                    "p50_ms": p50,
                    "speedup_vs_dense": dense_mean / mean_ms if mean_ms > 0 else float("inf"),
                    "visited_tiles": counter.visited,
                    "skipped_tiles": counter.skipped,
                    "nnz": msk.nnz,
                }
            )
    return rows
