"""Dense tensors with tape-recorded reverse-mode automatic differentiation.

Everything is numpy-backed. An operation records itself on the active Tape
whenever gradients are enabled and at least one input requires them;
``backward`` replays the tape in reverse, visiting each recorded op once.
Training runs in float32; gradcheck and verification runs use float64.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

# Additive mask value: finite (so the softmax finiteness check passes) but
# large enough that exp() underflows to exactly 0 in both precisions.
MASK_VALUE = -1e30

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation requiring finite input."""


class Tensor:
    """n-dimensional value, optionally carrying a gradient after backward()."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)  # explicit precision is preserved
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the free functions do the actual work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class _Op:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs, out, bwd):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of operations; inputs of every op precede it."""

    def __init__(self):
        self.ops: list[_Op] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, inputs: Sequence[Tensor], out: Tensor, bwd: Callable) -> None:
        self.ops.append(_Op(tuple(inputs), out, bwd))
        self._produced.add(id(out))
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t


_TAPE_STACK: list[Tape] = []
_GRAD_DISABLED = 0


def active_tape() -> Optional[Tape]:
    if _GRAD_DISABLED or not _TAPE_STACK:
        return None
    return _TAPE_STACK[-1]


class no_grad:
    """Context manager suppressing tape recording."""

    def __enter__(self):
        global _GRAD_DISABLED
        _GRAD_DISABLED += 1

    def __exit__(self, *exc):
        global _GRAD_DISABLED
        _GRAD_DISABLED -= 1


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, bwd: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(inputs, out, bwd)
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise ShapeError(f"dtype mismatch: {x.dtype} vs {like.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), out, bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    return _record((a,), -a.data, lambda g: (-g,))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record((a,), out, bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    t = np.tanh(c * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = c * (1.0 + (3 * 0.044715) * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * ((1.0 - t * t) * dinner)),)

    return _record((a,), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record((a,), out, bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record((a,), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record((a, b), out, bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _record((a,), out, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def bwd(g):
        if axis is None:
            gg = np.broadcast_to(g, a.shape)
        else:
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            gg = np.broadcast_to(g, a.shape)
        return ((gg / count).astype(a.dtype, copy=False),)

    return _record((a,), out, bwd)


# ---------------------------------------------------------------------------
# softmax family


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{op}: input contains NaN or Inf")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    _check_finite(a.data, "softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record((a,), out, bwd)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis; shares the max-subtracted path."""
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record((a,), out, bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Layer normalization over the last axis."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return dx.astype(x.dtype, copy=False), dgain, dbias

    return _record((x, gain, bias), out, bwd)


# ---------------------------------------------------------------------------
# gather / masking ops


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _record((weight,), out, bwd)


def gather_index(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis: out[...] = a[..., idx[...]]."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_index idx shape {idx.shape} != {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        ga = np.zeros_like(a.data)
        flat = ga.reshape(-1, a.shape[-1])
        np.add.at(flat, (np.arange(flat.shape[0]), idx.reshape(-1)), g.reshape(-1))
        return (ga,)

    return _record((a,), out, bwd)


def causal_mask(scores: Tensor) -> Tensor:
    """Replace entries above the diagonal of the last two axes with MASK_VALUE."""
    n_q, n_k = scores.shape[-2], scores.shape[-1]
    if n_q != n_k:
        raise ShapeError(f"causal_mask expects square last axes, got {scores.shape}")
    keep = np.tril(np.ones((n_q, n_k), dtype=bool))
    out = np.where(keep, scores.data, scores.dtype.type(MASK_VALUE))

    def bwd(g):
        return (np.where(keep, g, 0).astype(scores.dtype, copy=False),)

    return _record((scores,), out, bwd)


# ---------------------------------------------------------------------------
# backward + gradcheck


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    Leaves that entered the tape but do not participate in the loss graph
    get zero-filled grads. Accumulates across multiple uses of a leaf and
    across repeated backward calls.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is None or not loss.requires_grad:
        raise RuntimeError("backward: loss was not produced on an active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.bwd(g)):
            if gi is None or not inp.requires_grad:
                continue
            have = grads.get(id(inp))
            grads[id(inp)] = gi if have is None else have + gi
    for key, leaf in tape._leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = np.asarray(g, dtype=leaf.dtype)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def gradcheck(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic grads of fn() to central differences.

    `fn` must rebuild a scalar from the current values of the `wrt`
    tensors. Requires float64 tensors. Returns the worst relative error,
    with an absolute floor of 1 in the denominator.
    """
    for t in wrt:
        if t.dtype != np.float64:
            raise ValueError("gradcheck requires float64 tensors")
        t.zero_grad()
    with Tape():
        loss = fn()
        backward(loss)
    analytic = [t.grad.copy() for t in wrt]

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t, ga in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            picks = rng.choice(n, size=max_entries, replace=False)
        else:
            picks = np.arange(n)
        for i in picks:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = float(fn().data)
                flat[i] = orig - eps
                down = float(fn().data)
                flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = ga.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
    return worst


def randn(shape, rng: np.random.Generator, std: float = 1.0, dtype=np.float32,
          requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)
