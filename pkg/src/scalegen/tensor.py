"""Tape-based reverse-mode autodiff on numpy arrays over a fixed op set.

The tape records one closure per primitive in execution order; backward
replays them in exact reverse order, and every gradient accumulation is an
in-place add in that fixed order, so repeated runs on identical inputs give
bit-identical gradients.

Op set: add, mul, matmul, gelu, layer_norm, embedding, softmax,
cross_entropy, interpolate, attention, plus the structural ops (rows,
concat_rows, reshape_rows, mean, tsum) needed to assemble sequences and
losses.
"""

from __future__ import annotations

import math

import numpy as np

from . import attention as attn_kernel
from . import interp
from .common import InvalidArgument, NumericFailure

_TAPES: list["Tape"] = []


class Tensor:
    """Dense row-major array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        else:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise InvalidArgument(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def check_finite(self, what: str = "tensor"):
        if not np.isfinite(self.data).all():
            raise NumericFailure(f"non-finite values in {what}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Execution-ordered record of primitives for one backward replay."""

    def __init__(self):
        self._ops = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._ops)

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def backward(self, out: Tensor):
        if out.size != 1:
            raise InvalidArgument("backward requires a scalar output")
        if not np.isfinite(out.data).all():
            raise NumericFailure("backward on a non-finite scalar")
        out.grad = np.ones_like(out.data)
        for fn in reversed(self._ops):
            fn()


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _wants_grad(*tensors):
    t = _tape()
    if t is None:
        return False, None
    return any(isinstance(x, Tensor) and x.requires_grad for x in tensors), t


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, s in enumerate(shape):
        if s == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(other, dtype):
    """Non-Tensor operands become constant arrays in the partner's dtype."""
    arr = np.asarray(other)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def add(a: Tensor, b) -> Tensor:
    b_is_t = isinstance(b, Tensor)
    if b_is_t and a.dtype != b.dtype:
        raise InvalidArgument(f"dtype mismatch in add: {a.dtype} vs {b.dtype}")
    b_data = b.data if b_is_t else _coerce(b, a.dtype)
    need, tape = _wants_grad(a, b)
    out = Tensor(a.data + b_data, requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b_is_t and b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))
        tape.record(backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    b_is_t = isinstance(b, Tensor)
    if b_is_t and a.dtype != b.dtype:
        raise InvalidArgument(f"dtype mismatch in mul: {a.dtype} vs {b.dtype}")
    b_data = b.data if b_is_t else _coerce(b, a.dtype)
    need, tape = _wants_grad(a, b)
    out = Tensor(a.data * b_data, requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b_data, a.shape))
            if b_is_t and b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape))
        tape.record(backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidArgument(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgument(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise InvalidArgument(f"dtype mismatch in matmul: {a.dtype} vs {b.dtype}")
    need, tape = _wants_grad(a, b)
    out = Tensor(a.data @ b.data, requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        tape.record(backward)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Tanh-form gelu; smooth, so finite differences stay well conditioned."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(u)
    need, tape = _wants_grad(x)
    out = Tensor(0.5 * xd * (1.0 + t), requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
            dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
            _accum(x, g * dx)
        tape.record(backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    need, tape = _wants_grad(x, gain, bias)
    out = Tensor(xh * gain.data + bias.data, requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            dxh = g * gain.data
            if gain.requires_grad:
                _accum(gain, _unbroadcast(g * xh, gain.shape))
            if bias.requires_grad:
                _accum(bias, _unbroadcast(g, bias.shape))
            if x.requires_grad:
                m1 = dxh.mean(axis=-1, keepdims=True)
                m2 = (dxh * xh).mean(axis=-1, keepdims=True)
                _accum(x, inv * (dxh - m1 - xh * m2))
        tape.record(backward)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; backward scatters with np.add.at (deterministic order)."""
    idx = np.asarray(ids)
    if idx.dtype.kind not in "iu":
        raise InvalidArgument(f"embedding ids must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InvalidArgument(
            f"embedding id out of range [0, {table.shape[0]}): min {idx.min()}, max {idx.max()}"
        )
    need, tape = _wants_grad(table)
    out = Tensor(table.data[idx], requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        tape.record(backward)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along an axis; fully masked rows are an error."""
    xd = x.data
    if axis >= xd.ndim or axis < -xd.ndim:
        raise InvalidArgument(f"softmax axis {axis} invalid for shape {xd.shape}")
    m = xd.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise InvalidArgument("softmax over a row with no finite entries")
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    p = e / s
    need, tape = _wants_grad(x)
    out = Tensor(p, requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            inner = (g * p).sum(axis=axis, keepdims=True)
            _accum(x, p * (g - inner))
        tape.record(backward)
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """-log softmax(logits)[target]; vector [V] -> scalar, [n, V] -> [n].

    Backward produces softmax(logits) - onehot(target), scaled by the
    incoming gradient.
    """
    single = logits.ndim == 1
    ld = logits.data[None, :] if single else logits.data
    if ld.ndim != 2:
        raise InvalidArgument(f"cross_entropy expects [V] or [n, V] logits, got {logits.shape}")
    t = np.atleast_1d(np.asarray(targets))
    if t.dtype.kind not in "iu":
        raise InvalidArgument(f"targets must be integers, got dtype {t.dtype}")
    n, v = ld.shape
    if t.shape != (n,):
        raise InvalidArgument(f"targets shape {t.shape} does not match {n} rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise InvalidArgument(f"target out of range [0, {v}): min {t.min()}, max {t.max()}")
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    losses = np.log(s)[:, 0] - z[np.arange(n), t]
    need, tape = _wants_grad(logits)
    out = Tensor(losses[0] if single else losses, requires_grad=need)
    if need:
        p = e / s
        def backward():
            g = out.grad
            if g is None:
                return
            gv = np.atleast_1d(g)
            dl = p.copy()
            dl[np.arange(n), t] -= 1.0
            dl *= gv[:, None]
            _accum(logits, dl[0] if single else dl)
        tape.record(backward)
    return out


def mean(x: Tensor) -> Tensor:
    need, tape = _wants_grad(x)
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype), requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, np.full_like(x.data, g / x.size))
        tape.record(backward)
    return out


def tsum(x: Tensor) -> Tensor:
    need, tape = _wants_grad(x)
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype), requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, np.full_like(x.data, g))
        tape.record(backward)
    return out


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along axis 0."""
    if not (0 <= start <= stop <= x.shape[0]):
        raise InvalidArgument(f"row slice [{start}:{stop}] out of range for {x.shape}")
    need, tape = _wants_grad(x)
    out = Tensor(x.data[start:stop].copy(), requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += g
        tape.record(backward)
    return out


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise InvalidArgument("concat_rows needs at least one part")
    if any(p.dtype != parts[0].dtype for p in parts):
        raise InvalidArgument("dtype mismatch in concat_rows")
    need, tape = _wants_grad(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=0), requires_grad=need)
    if need:
        offsets = np.cumsum([0] + [p.shape[0] for p in parts])
        def backward():
            g = out.grad
            if g is None:
                return
            for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _accum(p, g[a:b])
        tape.record(backward)
    return out


def reshape_rows(x: Tensor, shape) -> Tensor:
    need, tape = _wants_grad(x)
    out = Tensor(x.data.reshape(shape).copy(), requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g.reshape(x.shape))
        tape.record(backward)
    return out


def interpolate(x: Tensor, target_h: int, target_w: int, mode: str | None = None) -> Tensor:
    """Grid resize as a tape op; backward applies the transposed weights."""
    if x.ndim != 3:
        raise InvalidArgument(f"interpolate op expects [H, W, D], got {x.shape}")
    h, w = x.shape[0], x.shape[1]
    need, tape = _wants_grad(x)
    out = Tensor(interp.interpolate(x.data, target_h, target_w, mode), requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, interp.interpolate_transpose(g, h, w, mode))
        tape.record(backward)
    return out


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask,
    heads: int,
    tile: int = 64,
    counter=None,
) -> Tensor:
    """Multi-head masked attention over [N, width] projections."""
    n, width = q.shape
    if width % heads:
        raise InvalidArgument(f"width {width} not divisible by {heads} heads")
    if q.shape != k.shape or q.shape != v.shape:
        raise InvalidArgument("q/k/v shapes must match")
    d = width // heads

    def split(t):
        return np.ascontiguousarray(t.data.reshape(n, heads, d).transpose(1, 0, 2))

    def merge(a):
        return np.ascontiguousarray(a.transpose(1, 0, 2).reshape(n, width))

    out3, saved = attn_kernel.tiled_attention(split(q), split(k), split(v), mask, tile=tile, counter=counter)
    need, tape = _wants_grad(q, k, v)
    out = Tensor(merge(out3), requires_grad=need)
    if need:
        def backward():
            g = out.grad
            if g is None:
                return
            g3 = np.ascontiguousarray(g.reshape(n, heads, d).transpose(1, 0, 2))
            dq, dk, dv = attn_kernel.tiled_attention_backward(saved, g3)
            if q.requires_grad:
                _accum(q, merge(dq))
            if k.requires_grad:
                _accum(k, merge(dk))
            if v.requires_grad:
                _accum(v, merge(dv))
        tape.record(backward)
    return out


def softmax_stable(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array stable softmax (no tape), matching the Tensor op."""
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise InvalidArgument("softmax over a row with no finite entries")
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def streaming_softmax(x: np.ndarray, chunk: int, axis: int = -1) -> np.ndarray:
    """Online softmax: running max / sum-of-exponentials merged chunk by chunk.

    This is the merging rule the tiled attention kernel uses; it must agree
    with the batch softmax to float tolerance.
    """
    x = np.asarray(x, dtype=np.float64)
    if chunk < 1:
        raise InvalidArgument(f"chunk must be >= 1, got {chunk}")
    moved = np.moveaxis(x, axis, -1)
    n = moved.shape[-1]
    m = np.full(moved.shape[:-1], -np.inf)
    s = np.zeros(moved.shape[:-1])
    for a in range(0, n, chunk):
        part = moved[..., a : a + chunk]
        m_new = np.maximum(m, part.max(axis=-1))
        with np.errstate(invalid="ignore"):
            alpha = np.where(np.isneginf(m), 0.0, np.exp(m - m_new))
            p = np.where(
                np.isneginf(m_new)[..., None], 0.0, np.exp(part - m_new[..., None])
            )
        s = s * alpha + p.sum(axis=-1)
        m = m_new
    if np.isneginf(m).any():
        raise InvalidArgument("softmax over a row with no finite entries")
    out = np.exp(moved - m[..., None]) / s[..., None]
    return np.moveaxis(out, -1, axis)


def grad_check(f, params: list[Tensor], eps: float = 1e-5, sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    f() must rebuild the computation from `params` and return a scalar Tensor.
    Runs in 64-bit only. With sample=N, checks N seeded coordinates per
    parameter instead of every element.
    """
    for p in params:
        if p.dtype != np.float64:
            raise InvalidArgument("grad_check requires float64 parameters")
        p.zero_grad()
    with Tape() as tape:
        out = f()
        if not np.isfinite(out.data).all():
            raise NumericFailure("grad_check objective is non-finite")
        tape.backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        if sample is None or sample >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=sample, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_hi = f().item()
            flat[idx] = orig - eps
            f_lo = f().item()
            flat[idx] = orig
            if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
                raise NumericFailure("grad_check perturbation produced non-finite values")
            numeric = (f_hi - f_lo) / (2.0 * eps)
            rel = abs(ga.reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
    return worst
