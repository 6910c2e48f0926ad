"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A ``Tape`` records operations in construction order (which is already a
topological order); ``backward`` walks it once in reverse.  Tensors are thin
wrappers around ``np.ndarray``.  float64 is the default dtype; float32 is
supported for speed-critical training runs (tests that probe gradient
fidelity should stay in float64).

Recording only happens while a tape is active and at least one input of an
op requires gradients, so the same code paths can be used for cheap pure
inference (e.g. the coarse sampling pass) with no overhead beyond numpy.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float64

_active_tape = None
_grad_enabled = True


class Tape:
    """Ordered record of operations for one backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False


class no_grad:
    """Context manager disabling tape recording (values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense array with optional gradient tracking.

    ``data`` is always a float numpy array.  ``grad`` is filled in by
    ``backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _recording(*tensors: Tensor) -> bool:
    return (
        _grad_enabled
        and _active_tape is not None
        and any(t.requires_grad for t in tensors)
    )


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward
    _active_tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray, own: bool):
    """Accumulate gradient ``g`` into ``t``.

    ``own=True`` promises ``g`` is a fresh array the tensor may keep;
    passthrough gradients must use ``own=False`` so aliasing between nodes
    cannot corrupt already-assigned gradients.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``.

    Returns ``g`` itself when no reduction is needed (callers then pass
    ``own=False``); otherwise a fresh reduced array.
    """
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g)


def backward(root: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar root over the active tape."""
    tape = _active_tape
    if tape is None:
        raise RuntimeError("backward requires an active tape")
    if tape.consumed:
        raise RuntimeError("tape already consumed; build a fresh tape before calling backward again")
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    tape.consumed = True
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
        # break closure cycles and drop intermediate grads so the graph is
        # freed by refcounting as soon as callers release their tensors
        node._backward = None
        node._parents = ()
        node.grad = None


# ---------------------------------------------------------------------------
# primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    if _recording(a, b):
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape), own=g.shape != a.data.shape)
            _accum(b, _unbroadcast(g, b.data.shape), own=g.shape != b.data.shape)
        _record(out, (a, b), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    if _recording(a, b):
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape), own=g.shape != a.data.shape)
            _accum(b, _unbroadcast(-g, b.data.shape), own=True)
        _record(out, (a, b), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    if _recording(a, b):
        def bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape), own=True)
        _record(out, (a, b), bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    if _recording(a, b):
        def bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.data.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * out.data / b.data, b.data.shape), own=True)
        _record(out, (a, b), bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    if _recording(a):
        _record(out, (a,), lambda g: _accum(a, -g, own=True))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    if _recording(a):
        _record(out, (a,), lambda g: _accum(a, g * out.data, own=True))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    if _recording(a):
        _record(out, (a,), lambda g: _accum(a, g / a.data, own=True))
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    if _recording(a):
        _record(out, (a,), lambda g: _accum(a, g / (2.0 * out.data), own=True))
    return out


def sin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.data))
    if _recording(a):
        _record(out, (a,), lambda g: _accum(a, g * np.cos(a.data), own=True))
    return out


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.data))
    if _recording(a):
        _record(out, (a,), lambda g: _accum(a, -g * np.sin(a.data), own=True))
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    if _recording(a):
        od = out.data

        def bwd(g):
            from . import _fastops
            gc = np.ascontiguousarray(g)
            gx = np.empty_like(gc)
            _fastops.tanh_bwd_flat(gc.ravel(), od.ravel(), gx.ravel())
            _accum(a, gx, own=True)
        _record(out, (a,), bwd)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(expit(a.data))
    if _recording(a):
        _record(out, (a,), lambda g: _accum(a, g * out.data * (1.0 - out.data), own=True))
    return out


def softplus(a: Tensor) -> Tensor:
    # log(1 + exp(x)) via logaddexp, stable for large |x|
    out = Tensor(np.logaddexp(np.zeros((), dtype=a.dtype), a.data))
    if _recording(a):
        _record(out, (a,), lambda g: _accum(a, g * expit(a.data), own=True))
    return out


def absval(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    if _recording(a):
        # subgradient sign(0) = 0
        _record(out, (a,), lambda g: _accum(a, g * np.sign(a.data), own=True))
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi))
    if _recording(a):
        mask = (a.data >= lo) & (a.data <= hi)
        _record(out, (a,), lambda g: _accum(a, g * mask, own=True))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if _recording(a, b):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T, own=True)
            if b.requires_grad:
                _accum(b, a.data.T @ g, own=True)
        _record(out, (a, b), bwd)
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` (b broadcast over rows). One node, fresh gradients."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"affine shape mismatch: {x.data.shape} @ {w.data.shape}")
    from . import _fastops
    prod = x.data @ w.data
    _fastops.add_bias_inplace(prod, b.data)
    out = Tensor(prod)
    if _recording(x, w, b):
        def bwd(g):
            if x.requires_grad:
                _accum(x, g @ w.data.T, own=True)
            if w.requires_grad:
                _accum(w, x.data.T @ g, own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape), own=True)
        _record(out, (x, w, b), bwd)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    if _recording(a):
        def bwd(g):
            if axis is None:
                _accum(a, np.full_like(a.data, float(g)), own=True)
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _accum(a, np.broadcast_to(ge, a.data.shape).copy(), own=True)
        _record(out, (a,), bwd)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if _recording(a):
        n = a.data.size if axis is None else a.data.shape[axis]
        def bwd(g):
            if axis is None:
                _accum(a, np.full_like(a.data, float(g) / n), own=True)
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _accum(a, np.broadcast_to(ge / n, a.data.shape).copy(), own=True)
        _record(out, (a,), bwd)
    return out


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    out = Tensor(np.cumsum(a.data, axis=axis))
    if _recording(a):
        def bwd(g):
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            _accum(a, np.ascontiguousarray(rev), own=True)
        _record(out, (a,), bwd)
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _recording(*tensors):
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _accum(t, np.ascontiguousarray(g[tuple(sl)]), own=True)
        _record(out, tuple(tensors), bwd)
    return out


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather along axis 0; scatter-add backward (bincount per column)."""
    idx = np.asarray(idx)
    out = Tensor(a.data[idx])
    if _recording(a):
        n = a.data.shape[0]
        def bwd(g):
            if a.data.ndim == 1:
                acc = np.bincount(idx, weights=g, minlength=n).astype(a.dtype)
            elif a.data.ndim == 2:
                cols = [np.bincount(idx, weights=g[:, j], minlength=n)
                        for j in range(a.data.shape[1])]
                acc = np.stack(cols, axis=1).astype(a.dtype)
            else:
                acc = np.zeros_like(a.data)
                np.add.at(acc, idx, g)
            _accum(a, acc, own=True)
        _record(out, (a,), bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if _recording(a):
        def bwd(g):
            _accum(a, g.reshape(a.data.shape), own=False)
        _record(out, (a,), bwd)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(np.ascontiguousarray(a.data[sl]))
    if _recording(a):
        def bwd(g):
            acc = np.zeros_like(a.data)
            acc[sl] = g
            _accum(a, acc, own=True)
        _record(out, (a,), bwd)
    return out


def detach(a: Tensor) -> Tensor:
    """Stop-gradient: same values, no recorded parents."""
    return Tensor(a.data)


def stack_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of length n into an (n, k) tensor."""
    return concat([reshape(t, (-1, 1)) for t in tensors], axis=1)


# ---------------------------------------------------------------------------
# verification

def finite_difference_check(f: Callable[[], "Tensor | float"], p: Tensor,
                            eps: float = 1e-5, indices=None) -> float:
    """Compare analytic gradients of scalar ``f()`` w.r.t. ``p`` against
    central finite differences.

    Returns max over checked coordinates of
    ``|analytic - fd| / max(1, |analytic|)``.  Non-finite values of ``f``
    make the check fail (returns inf).  ``indices`` restricts the probe to a
    subset of flat coordinates (needed when p is large).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    p.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    if p.grad is None:
        analytic = np.zeros_like(p.data)
    else:
        analytic = p.grad.copy()
    p.zero_grad()

    if indices is None:
        indices = range(p.data.size)
    worst = 0.0
    for i in indices:
        ij = np.unravel_index(i, p.data.shape)
        orig = p.data[ij]
        p.data[ij] = orig + eps
        with no_grad():
            fp = float(np.asarray(_eval_scalar(f)))
        p.data[ij] = orig - eps
        with no_grad():
            fm = float(np.asarray(_eval_scalar(f)))
        p.data[ij] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            return float("inf")
        fd = (fp - fm) / (2.0 * eps)
        a = analytic[ij]
        err = abs(a - fd) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst


def _eval_scalar(f):
    v = f()
    return v.data if isinstance(v, Tensor) else v
