"""Minimal reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps an ndarray. Operations on tensors that require
gradients record a closure mapping the output gradient to the input
gradients; :meth:`Tensor.backward` replays those closures in reverse
topological order. Only leaf tensors keep a ``.grad``; repeated backward
passes add into it.

Broadcasting is numpy's, restricted in practice to what the model uses:
bias vectors over leading axes and extent-1 axes. Gradients are summed back
over every broadcast axis.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from icdt import kernels

DEFAULT_DTYPE = np.float32
LAYERNORM_EPS = 1e-6

_grad_enabled = True


class DimensionError(ValueError):
    """Raised on incompatible or invalid tensor shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _contig(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray turns 0-d arrays into 1-d ones
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ndarray (op) Tensor dispatch to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = _contig(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._wrap(other))

    def __rtruediv__(self, other):
        return div(self._wrap(other), self)

    def __neg__(self):
        return mul(self, self._wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return mul(self, self)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def silu(x: Tensor) -> Tensor:
    return _make(kernels.silu_fwd(x.data), (x,), lambda g: (kernels.silu_bwd(g, x.data),))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    return _make(kernels.gelu_fwd(x.data), (x,), lambda g: (kernels.gelu_bwd(g, x.data),))


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(_contig(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(_contig(np.asarray(out)), (x,), back)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` along the last axis."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for last extent {x.shape[-1]}")
    return getitem(x, (Ellipsis, slice(start, stop)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ off-axis")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            _contig(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join two ``...×C`` fields along the channel (last) axis."""
    return concat([a, b], axis=-1)


# ----------------------------------------------------------------------
# linear algebra and normalization
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y + bias if bias is not None else y


def layernorm_no_affine(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance; no scale or shift."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError(f"layernorm needs a non-empty last axis, got shape {x.shape}")
    x2 = x.data.reshape(-1, d)
    y, rstd = kernels.layernorm_fwd(x2, eps)

    def back(g):
        return (kernels.layernorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), y, rstd).reshape(x.shape),)

    return _make(y.reshape(x.shape), (x,), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    d = x.shape[-1]
    p = kernels.softmax_fwd(x.data.reshape(-1, d))

    def back(g):
        return (kernels.softmax_bwd(np.ascontiguousarray(g.reshape(-1, d)), p).reshape(x.shape),)

    return _make(p.reshape(x.shape), (x,), back)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / √dh) v over the last two axes, unmasked.

    Inputs are ``(..., h, S, dh)``; leading axes are treated as batch.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention needs equal q/k/v shapes, got {q.shape}, {k.shape}, {v.shape}")
    S, dh = q.shape[-2], q.shape[-1]
    scale = 1.0 / math.sqrt(dh)
    kt = np.swapaxes(k.data, -1, -2)
    scores = np.matmul(q.data, kt) * np.asarray(scale, dtype=q.dtype)
    p = kernels.softmax_fwd(np.ascontiguousarray(scores.reshape(-1, S))).reshape(scores.shape)
    out = np.matmul(p, v.data)

    def back(g):
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = kernels.softmax_bwd(np.ascontiguousarray(dp.reshape(-1, S)), p.reshape(-1, S)).reshape(p.shape)
        ds = ds * np.asarray(scale, dtype=q.dtype)
        dq = np.matmul(ds, k.data)
        dk = np.matmul(np.swapaxes(ds, -1, -2), q.data)
        return dq, dk, dv

    return _make(out, (q, k, v), back)


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], x: Tensor, index: tuple, h: float = 1e-6) -> float:
    """Central difference of scalar ``fn()`` w.r.t. one element of ``x``."""
    old = x.data[index].copy()
    x.data[index] = old + h
    with no_grad():
        fp = float(fn().data.sum())
    x.data[index] = old - h
    with no_grad():
        fm = float(fn().data.sum())
    x.data[index] = old
    return (fp - fm) / (2 * h)


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    probes: int = 100,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-3,
) -> float:
    """Max relative error between backward and central differences.

    ``probes`` random elements are drawn across all ``inputs``; relative error
    is ``|a - n| / max(|a|, |n|, floor)``: gradients smaller than ``floor``
    are compared absolutely, since central differences of a large scalar lose
    that many digits to rounding. Run in float64.
    """
    rng = rng or np.random.default_rng(0)
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = fn()
    out.backward(np.ones_like(out.data))
    worst = 0.0
    for _ in range(probes):
        t = inputs[rng.integers(len(inputs))]
        idx = tuple(int(rng.integers(n)) for n in t.shape)
        analytic = float(t.grad[idx]) if t.grad is not None else 0.0
        numeric = numerical_grad(fn, t, idx, h)
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
