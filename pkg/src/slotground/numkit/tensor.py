"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` wraps a float64 ndarray. Operations on tensors that require
gradients record their parents and a backward closure; :func:`grad` walks the
recorded graph in reverse topological order. Tensors are never mutated after
construction, so sharing them across threads for reading is safe.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

Params = dict  # name -> Tensor


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class NonDifferentiableError(RuntimeError):
    """Backward pass reached an op with no derivative."""

    def __init__(self, op: str):
        super().__init__(f"op '{op}' is not differentiable")
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        # leaves copy caller data; op outputs already own a fresh buffer
        arr = np.array(data, dtype=np.float64) if op == "leaf" else np.asarray(data, dtype=np.float64)
        arr.flags.writeable = False
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __pow__(self, k): return power(self, k)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)
    def swapaxes(self, a, b): return swapaxes(self, a, b)

    @property
    def T(self): return swapaxes(self, -1, -2)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    """Trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64))


def _make(data, parents, backward, op) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = astensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, k: float) -> Tensor:
    a = astensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** k
    return _make(out, (a,), lambda g: (g * k * a.data ** (k - 1),), "pow")


def exp(a) -> Tensor:
    a = astensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = astensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = astensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = astensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = astensor(a)
    x = a.data
    # two-branch form keeps exp() from overflowing
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = astensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def back(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)
    return _make(out, (a,), back, "gelu")


def relu(a) -> Tensor:
    a = astensor(a)
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,), "relu")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = astensor(a), astensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make(out, (a, b), lambda g: (_unbroadcast(g * pick_a, a.shape),
                                         _unbroadcast(g * ~pick_a, b.shape)), "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = astensor(a), astensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make(out, (a, b), lambda g: (_unbroadcast(g * pick_a, a.shape),
                                         _unbroadcast(g * ~pick_a, b.shape)), "maximum")


def clip(a, lo: float, hi: float) -> Tensor:
    a = astensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def where(cond, a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    c = np.asarray(cond, dtype=bool)
    return _make(np.where(c, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(c, g, 0.0), a.shape),
                            _unbroadcast(np.where(c, 0.0, g), b.shape)), "where")


def _nondiff(op: str):
    def back(g):
        raise NonDifferentiableError(op)
    return back


def step(a, threshold: float = 0.0) -> Tensor:
    """Hard threshold ``1[a > threshold]``; has no derivative."""
    a = astensor(a)
    return _make((a.data > threshold).astype(np.float64), (a,), _nondiff("step"), "step")


def round_(a) -> Tensor:
    a = astensor(a)
    return _make(np.round(a.data), (a,), _nondiff("round"), "round")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul needs at least 1-D operands")
    av = a.data[None, :] if a.ndim == 1 else a.data
    bv = b.data[:, None] if b.ndim == 1 else b.data
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    outv = av @ bv
    out = outv
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def back(g):
        gv = g
        if b.ndim == 1:
            gv = gv[..., None]
        if a.ndim == 1:
            gv = gv[..., None, :]
        ga = gv @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ gv
        ga = _unbroadcast(ga, av.shape).reshape(a.shape)
        gb = _unbroadcast(gb, bv.shape).reshape(b.shape)
        return ga, gb
    return _make(out, (a, b), back, "matmul")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = astensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j) -> Tensor:
    a = astensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a, idx) -> Tensor:
    a = astensor(a)
    if isinstance(idx, Tensor):
        raise TypeError("index with arrays, not Tensors")

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)
    return _make(a.data[idx], (a,), back, "getitem")


def concat(ts: Iterable, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(out, ts, back, "concat")


def stack(ts: Iterable, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))
    return _make(out, ts, back, "stack")


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes."""
    a = astensor(a)
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width)
    sl = (Ellipsis, slice(pad, out.shape[-2] - pad), slice(pad, out.shape[-1] - pad))
    return _make(out, (a,), lambda g: (g[sl],), "pad2d")


# ---------------------------------------------------------------- fused primitives

def _sorted_sum(x, axis):
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1, order_invariant: bool = False) -> Tensor:
    """Max-subtracted softmax.

    ``order_invariant`` sums in sorted order, so permuting entries along ``axis``
    permutes the output bit-for-bit.
    """
    a = astensor(a)
    total = _sorted_sum if order_invariant else (lambda v, ax: v.sum(axis=ax, keepdims=True))
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / total(e, axis)

    def back(g):
        return (out * (g - total(g * out, axis)),)
    return _make(out, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return _make(out, (a,), back, "log_softmax")


def normalize_last(a, eps: float) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis, population variance."""
    a = astensor(a)
    n = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv / n * (n * g - gs - xhat * gx),)
    return _make(xhat, (a,), back, "layer_norm")


def conv2d(x, w, b=None, pad: int = 1) -> Tensor:
    """Cross-correlation of x (..., C, H, W) with w (O, C, kh, kw), stride 1."""
    x, w = astensor(x), astensor(w)
    if x.shape[-3] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch {x.shape} vs {w.shape}")
    kh, kw = w.shape[2:]
    lead = x.shape[:-3]
    xb = x.data.reshape((-1,) + x.shape[-3:])
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    H = xp.shape[2] - kh + 1
    W = xp.shape[3] - kw + 1
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B C H W kh kw
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # B H W O
    out = out.transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = astensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gb_ = g.reshape((-1,) + g.shape[-3:])
        gw = np.tensordot(gb_, cols, axes=([0, 2, 3], [0, 2, 3]))  # O C kh kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + H, j:j + W] += np.einsum("bohw,oc->bchw", gb_, w.data[:, :, i, j])
        gx = gxp[:, :, pad:pad + xb.shape[2], pad:pad + xb.shape[3]].reshape(x.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(gb_.sum(axis=(0, 2, 3)))
        return tuple(grads)
    return _make(out.reshape(lead + out.shape[1:]), parents, back, "conv2d")


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(out: Tensor, wrt: Iterable[Tensor]) -> list:
    """Gradients of scalar ``out`` with respect to each tensor in ``wrt``."""
    if out.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {out.shape}")
    wrt = list(wrt)
    grads = {id(out): np.ones_like(out.data)}
    for node in reversed(_toposort(out)):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = np.asarray(gp, dtype=np.float64)
    result = []
    for t in wrt:
        g = grads.get(id(t))
        result.append(np.zeros_like(t.data) if g is None else g.reshape(t.shape))
    return result


def value_and_grad(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
                   names: Iterable[str] | None = None):
    names = [n for n in (params if names is None else names) if params[n].requires_grad]
    out = f(params)
    gs = backward(out, [params[n] for n in names])
    return out.item(), dict(zip(names, gs))


def grad(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
         names: Iterable[str] | None = None) -> dict:
    """Gradient of the scalar composite ``f(params)`` for each trainable entry."""
    return value_and_grad(f, params, names)[1]
