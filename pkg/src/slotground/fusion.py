"""Cross-source swapping, modality adapters and bidirectional cross-attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import (Tensor, astensor, gelu, layer_norm, linear, matmul, softmax_axis, where,
                     init_linear, init_ln, param, make_rng, register_composite)


@dataclass
class MixPair:
    a: Tensor
    b: Tensor
    exchange_mask_channels: np.ndarray
    exchange_mask_spatial: np.ndarray | None = None


def exchange_mask(n: int, p: float) -> np.ndarray:
    """Deterministic mask: index i is exchanged iff i mod round(1/p) == 0 (none when p == 0)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"exchange fraction {p} outside [0, 1]")
    if p == 0.0:
        return np.zeros(n, bool)
    return np.arange(n) % int(round(1.0 / p)) == 0


def _check_pair(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"exchange needs equal shapes, got {a.shape} and {b.shape}")


def channel_exchange(hA, hB, p: float) -> MixPair:
    """Swap the masked channels (axis -3 of a (..., C, H, W) grid) between the two maps."""
    hA, hB = astensor(hA), astensor(hB)
    _check_pair(hA, hB)
    m = exchange_mask(hA.shape[-3], p)
    sel = m[:, None, None]
    return MixPair(where(sel, hB, hA), where(sel, hA, hB), m)


def spatial_swap(mixA, mixB, p: float) -> MixPair:
    """Swap the masked rows (axis -2) between the two maps."""
    mixA, mixB = astensor(mixA), astensor(mixB)
    _check_pair(mixA, mixB)
    m = exchange_mask(mixA.shape[-2], p)
    sel = m[:, None]
    return MixPair(where(sel, mixB, mixA), where(sel, mixA, mixB),
                   np.zeros(mixA.shape[-3], bool), m)


def spatial_exchange(mixA, mixB, p: float) -> Tensor:
    """Row swap followed by element-wise mean of the two swapped maps."""
    pair = spatial_swap(mixA, mixB, p)
    return (pair.a + pair.b) * 0.5


def css(h_rgb, h_s, p: float) -> Tensor:
    mix = channel_exchange(h_rgb, h_s, p)
    return spatial_exchange(mix.a, mix.b, p)


# ---------------------------------------------------------------- adapters

def init_adapter(rng, in_width: int, width: int, prefix: str) -> dict:
    out = init_ln(in_width, prefix + "ln.")
    out.update(init_linear(rng, in_width, 2 * width, prefix + "fc1."))
    out.update(init_linear(rng, 2 * width, width, prefix + "fc2."))
    out.update(init_linear(rng, width, width, prefix + "head."))
    return out


def grid_to_tokens(g) -> Tensor:
    """(..., C, H, W) -> (..., H*W, C)."""
    g = astensor(g)
    C, H, W = g.shape[-3:]
    return g.reshape(g.shape[:-3] + (C, H * W)).swapaxes(-1, -2)


def tokens_to_grid(t, H: int, W: int) -> Tensor:
    t = astensor(t)
    C = t.shape[-1]
    return t.swapaxes(-1, -2).reshape(t.shape[:-2] + (C, H, W))


def adapter(h, p: dict, which: str) -> Tensor:
    """Linear(MLP(LN(h))) with a GELU hidden layer of width 2d.

    ``which="2d"`` takes and returns a (..., C, H, W) grid; ``"3d"`` takes (..., M, C) tokens.
    """
    prefix = f"adapter_{which}."
    h = astensor(h)
    if which == "2d":
        H, W = h.shape[-2:]
        x = grid_to_tokens(h)
    elif which == "3d":
        x = h
    else:
        raise ValueError(f"adapter kind must be '2d' or '3d', not {which!r}")
    in_w = p[prefix + "ln.gamma"].shape[0]
    if x.shape[-1] != in_w:
        raise ValueError(f"adapter_{which} expects width {in_w}, got {x.shape[-1]}")
    y = layer_norm(x, p, prefix + "ln.")
    y = linear(gelu(linear(y, p[prefix + "fc1.W"], p[prefix + "fc1.b"])), p[prefix + "fc2.W"], p[prefix + "fc2.b"])
    y = linear(y, p[prefix + "head.W"], p[prefix + "head.b"])
    return tokens_to_grid(y, H, W) if which == "2d" else y


# ---------------------------------------------------------------- BCA

def init_bca(rng, width: int) -> dict:
    out = {}
    for direction in ("2d_pc", "pc_2d"):
        for name in ("q", "k", "v", "o"):
            out.update(init_linear(rng, width, width, f"bca.{direction}.{name}.", bias=False))
    return out


def attention(q_in, kv_in, p: dict, prefix: str, return_weights: bool = False):
    """Single-head scaled dot-product attention with learned Q/K/V/output projections."""
    q = linear(q_in, p[prefix + "q.W"])
    k = linear(kv_in, p[prefix + "k.W"])
    v = linear(kv_in, p[prefix + "v.W"])
    logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    w = softmax_axis(logits, -1)
    out = linear(matmul(w, v), p[prefix + "o.W"])
    return (out, w) if return_weights else out


def bca_fuse(h2d, hpc, p: dict, return_weights: bool = False):
    """z2d = h2d + Attn(h2d, hpc, hpc); zpc = hpc + Attn(hpc, h2d, h2d)."""
    h2d, hpc = astensor(h2d), astensor(hpc)
    if h2d.shape[-1] != hpc.shape[-1]:
        raise ValueError(f"BCA width mismatch {h2d.shape[-1]} vs {hpc.shape[-1]}")
    a2, w2 = attention(h2d, hpc, p, "bca.2d_pc.", True)
    ap, wp = attention(hpc, h2d, p, "bca.pc_2d.", True)
    z2d, zpc = h2d + a2, hpc + ap
    return (z2d, zpc, w2, wp) if return_weights else (z2d, zpc)


# ---------------------------------------------------------------- gradient-check composites

@register_composite("adapter")
def _gc_adapter():
    rng = make_rng(11)
    p = init_adapter(rng, 5, 4, "adapter_2d.")
    p = {k: param(v.data + rng.normal(0, 0.1, v.shape)) for k, v in p.items()}
    x = rng.normal(size=(5, 3, 3))
    w = rng.normal(size=(4, 3, 3))
    return (lambda q: (adapter(x, q, "2d") * w).sum()), p, None


@register_composite("bca")
def _gc_bca():
    rng = make_rng(12)
    p = init_bca(rng, 4)
    p["h2d"] = param(rng.normal(size=(6, 4)))
    p["hpc"] = param(rng.normal(size=(3, 4)))
    w1, w2 = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))

    def f(q):
        z2d, zpc = bca_fuse(q["h2d"], q["hpc"], q)
        return (z2d * w1).sum() + (zpc * w2).sum()
    return f, p, None
