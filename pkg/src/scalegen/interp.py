"""Grid resizing: area-average downsampling, bilinear upsampling.

Both directions are separable linear maps, represented as explicit per-axis
weight matrices. That keeps the forward path simple and gives the autodiff
layer an exact transpose for free.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .common import InvalidArgument

MODE_DOWN = "down-average"
MODE_UP = "up-bilinear"


@lru_cache(maxsize=256)
def _area_weights(dst: int, src: int) -> np.ndarray:
    """[dst, src] row-stochastic matrix averaging fractional source spans."""
    ratio = src / dst
    j = np.arange(src, dtype=np.float64)
    lo = np.arange(dst, dtype=np.float64)[:, None] * ratio
    hi = lo + ratio
    w = np.minimum(hi, j + 1.0) - np.maximum(lo, j)
    np.clip(w, 0.0, None, out=w)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


@lru_cache(maxsize=256)
def _bilinear_weights(dst: int, src: int) -> np.ndarray:
    """[dst, src] two-tap bilinear weights, align-corners-false convention."""
    w = np.zeros((dst, src), dtype=np.float64)
    if src == 1:
        w[:, 0] = 1.0
    else:
        pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        np.clip(pos, 0.0, src - 1.0, out=pos)
        j0 = np.floor(pos).astype(np.int64)
        t = pos - j0
        j1 = np.minimum(j0 + 1, src - 1)
        rows = np.arange(dst)
        np.add.at(w, (rows, j0), 1.0 - t)
        np.add.at(w, (rows, j1), t)
    w.setflags(write=False)
    return w


def axis_weights(src: int, dst: int, mode: str | None) -> np.ndarray | None:
    """Weight matrix for one axis; None means identity."""
    if src < 1 or dst < 1:
        raise InvalidArgument(f"interpolation sizes must be >= 1, got {src}->{dst}")
    if mode not in (None, MODE_DOWN, MODE_UP):
        raise InvalidArgument(f"unknown interpolation mode {mode!r}")
    if dst == src:
        return None
    if dst < src:
        if mode == MODE_UP:
            raise InvalidArgument(f"{MODE_UP} cannot shrink {src} to {dst}")
        return _area_weights(dst, src)
    if mode == MODE_DOWN:
        raise InvalidArgument(f"{MODE_DOWN} cannot grow {src} to {dst}")
    return _bilinear_weights(dst, src)


def apply_weights(x: np.ndarray, wr: np.ndarray | None, wc: np.ndarray | None) -> np.ndarray:
    """Apply per-axis weight matrices to a [H, W, ...] array."""
    y = x
    if wr is not None:
        y = np.tensordot(wr, y, axes=(1, 0))
    if wc is not None:
        y = np.moveaxis(np.tensordot(wc, y, axes=(1, 1)), 0, 1)
    return y


def interpolate(x: np.ndarray, target_h: int, target_w: int, mode: str | None = None) -> np.ndarray:
    """Resize a [H, W] or [H, W, D] grid; same-size is the exact identity.

    mode=None picks per axis: smaller targets use area averaging, larger use
    bilinear. Passing an explicit mode that conflicts with the direction is an
    error.
    """
    x = np.asarray(x)
    if x.ndim not in (2, 3):
        raise InvalidArgument(f"expected a 2-D or 3-D grid, got shape {x.shape}")
    h, w = x.shape[0], x.shape[1]
    if h < 1 or w < 1:
        raise InvalidArgument("source grid is empty")
    wr = axis_weights(h, target_h, mode)
    wc = axis_weights(w, target_w, mode)
    if wr is None and wc is None:
        return x.copy()
    y = apply_weights(x.astype(np.float64, copy=False), wr, wc)
    return np.ascontiguousarray(y.astype(x.dtype, copy=False))


def interpolate_transpose(
    g: np.ndarray, src_h: int, src_w: int, mode: str | None = None
) -> np.ndarray:
    """Adjoint of interpolate(src -> g.shape): maps output-space values back."""
    g = np.asarray(g)
    wr = axis_weights(src_h, g.shape[0], mode)
    wc = axis_weights(src_w, g.shape[1], mode)
    if wr is None and wc is None:
        return g.copy()
    y = apply_weights(
        g.astype(np.float64, copy=False),
        None if wr is None else wr.T.copy(),
        None if wc is None else wc.T.copy(),
    )
    return np.ascontiguousarray(y.astype(g.dtype, copy=False))
