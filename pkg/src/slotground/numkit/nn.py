"""Composite kernels shared by the model modules."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import (Tensor, NonFiniteError, astensor, concat, constant, log_softmax, matmul,
                     mul, normalize_last, param, sigmoid, softmax, tanh)

LN_EPS = 1e-5


def softmax_axis(t, axis: int) -> Tensor:
    """Max-subtracted softmax along ``axis``, equivariant to permutations of that axis."""
    t = astensor(t)
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"axis {axis} out of range for rank {t.ndim}")
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError("softmax_axis input is not finite")
    return softmax(t, axis=axis, order_invariant=True)


def log_softmax_axis(t, axis: int = -1) -> Tensor:
    return log_softmax(astensor(t), axis=axis)


def layer_norm(t, p: dict | None = None, prefix: str = "", eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis, then apply ``p[prefix+'gamma']`` / ``p[prefix+'beta']``.

    With ``p`` omitted the affine step is skipped (gamma=1, beta=0).
    """
    t = astensor(t)
    if t.ndim == 0 or t.shape[-1] == 0:
        raise ValueError("layer_norm needs a non-empty last axis")
    if t.shape[-1] < 2:
        raise ValueError("layer_norm needs at least two entries on the last axis")
    out = normalize_last(t, eps)
    if p is None:
        return out
    return out * p[prefix + "gamma"] + p[prefix + "beta"]


def linear(x, w, b=None) -> Tensor:
    """x @ w.T + b, with w shaped (out, in)."""
    x = astensor(x)
    if x.shape[-1] != w.shape[-1]:
        raise ValueError(f"linear width mismatch: input {x.shape[-1]}, weight expects {w.shape[-1]}")
    y = matmul(x, w.T)
    return y if b is None else y + b


def gru_cell(state, inp, p: dict, prefix: str = "") -> Tensor:
    """One GRU step. Update gate z keeps the old state: new = (1 - z) * n + z * state.

    Weights act on the concatenation ``[input, state]``: ``W_z``, ``W_r``, ``W_n`` are
    (hidden, in + hidden).
    """
    state, inp = astensor(state), astensor(inp)
    hidden = p[prefix + "W_z"].shape[0]
    if state.shape[:-1] != inp.shape[:-1]:
        raise ValueError(f"gru_cell batch mismatch {state.shape} vs {inp.shape}")
    if state.shape[-1] != hidden:
        raise ValueError(f"gru_cell state width {state.shape[-1]} != hidden width {hidden}")
    xs = concat([inp, state], axis=-1)
    z = sigmoid(linear(xs, p[prefix + "W_z"], p[prefix + "b_z"]))
    r = sigmoid(linear(xs, p[prefix + "W_r"], p[prefix + "b_r"]))
    n = tanh(linear(concat([inp, mul(r, state)], axis=-1), p[prefix + "W_n"], p[prefix + "b_n"]))
    return (1.0 - z) * n + z * state


def init_gru(rng, in_width: int, hidden: int, prefix: str = "") -> dict:
    s = 1.0 / np.sqrt(in_width + hidden)
    out = {}
    for g in ("z", "r", "n"):
        out[f"{prefix}W_{g}"] = param(rng.uniform(-s, s, (hidden, in_width + hidden)))
        out[f"{prefix}b_{g}"] = param(np.zeros(hidden))
    return out


def init_linear(rng, n_in: int, n_out: int, prefix: str, bias: bool = True, scale: float | None = None) -> dict:
    s = (1.0 / np.sqrt(n_in)) if scale is None else scale
    out = {prefix + "W": param(rng.normal(0.0, s, (n_out, n_in)))}
    if bias:
        out[prefix + "b"] = param(np.zeros(n_out))
    return out


def init_ln(width: int, prefix: str) -> dict:
    return {prefix + "gamma": param(np.ones(width)), prefix + "beta": param(np.zeros(width))}


@lru_cache(maxsize=64)
def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    m.flags.writeable = False
    return m


def bilinear_upsample(t, H0: int, W0: int) -> Tensor:
    """Corner-aligned bilinear resize of the last two axes to (H0, W0)."""
    t = astensor(t)
    if H0 <= 0 or W0 <= 0:
        raise ValueError("target extents must be positive")
    H, W = t.shape[-2:]
    if H0 < H or W0 < W:
        raise ValueError(f"upsample target ({H0},{W0}) smaller than source ({H},{W})")
    if (H0, W0) == (H, W):
        return t
    ry = constant(_interp_matrix(H0, H))
    rx = constant(_interp_matrix(W0, W))
    return matmul(matmul(ry, t), rx.T)


def upsample_np(a: np.ndarray, H0: int, W0: int) -> np.ndarray:
    return bilinear_upsample(constant(a), H0, W0).data
