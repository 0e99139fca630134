"""Slot Attention over an adapted 2D feature grid, plus the slot regulariser."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import grid_to_tokens
from .numkit import (Tensor, NonFiniteError, astensor, constant, exp, gelu, gru_cell, layer_norm,
                     linear, matmul, maximum, param, softmax_axis, sqrt, tsum, init_gru,
                     init_linear, init_ln, make_rng, register_composite)

WM_EPS = 1e-8
SLOT_BUDGET = 8192   # max K * D_slot


@dataclass
class SlotState:
    Z: Tensor            # (..., K, D)
    A_map: Tensor        # (..., K, H, W)
    iterations_run: int
    attn_history: list = field(default_factory=list, repr=False)

    @property
    def K(self) -> int:
        return self.Z.shape[-2]


def init_slots(rng, in_width: int, width: int, prefix: str = "slots.") -> dict:
    p = init_ln(in_width, prefix + "ln_in.")
    p[prefix + "mu"] = param(rng.normal(0.0, 1.0 / np.sqrt(width), width))
    p[prefix + "log_sigma"] = param(np.full(width, np.log(0.5)))
    p.update(init_linear(rng, width, width, prefix + "q.", bias=False))
    p.update(init_linear(rng, in_width, width, prefix + "k.", bias=False))
    p.update(init_linear(rng, in_width, width, prefix + "v.", bias=False))
    p.update(init_ln(width, prefix + "ln_slots."))
    p.update(init_gru(rng, width, width, prefix + "gru."))
    p.update(init_ln(width, prefix + "ln_mlp."))
    p.update(init_linear(rng, width, 2 * width, prefix + "mlp1."))
    p.update(init_linear(rng, 2 * width, width, prefix + "mlp2."))
    return p


def weighted_mean(A, V, eps: float = WM_EPS) -> Tensor:
    """U[k] = sum_i (A[i,k] + eps) V[i] / sum_i (A[i,k] + eps); A is (..., N, K), V is (..., N, D)."""
    A, V = astensor(A), astensor(V)
    if A.shape[-2] != V.shape[-2]:
        raise ValueError(f"weighted_mean token mismatch {A.shape} vs {V.shape}")
    Wt = (A + eps).swapaxes(-1, -2)                    # (..., K, N)
    return matmul(Wt, V) / tsum(Wt, axis=-1, keepdims=True)


def slot_init_noise(seed, shape) -> np.ndarray:
    return make_rng(seed).standard_normal(shape)


def slot_attention(F, K: int, T: int, p: dict, seed=0, noise=None, eps: float = WM_EPS,
                   prefix: str = "slots.", budget: int = SLOT_BUDGET, check: bool = False) -> SlotState:
    """Iterative slot attention on a (..., C, H, W) grid.

    ``noise`` (..., K, D) overrides the seeded standard-normal draw used for
    ``Z = mu + sigma * noise``. With ``check=True`` the slot-axis normalisation of
    every iteration's attention is asserted and kept in ``attn_history``.
    """
    if K < 1 or T < 1:
        raise ValueError(f"slot attention needs K >= 1 and T >= 1 (got K={K}, T={T})")
    F = astensor(F)
    D = p[prefix + "mu"].shape[0]
    if K * D > budget:
        raise ValueError(f"K * D_slot = {K * D} exceeds the slot budget {budget}")
    sigma_data = np.exp(p[prefix + "log_sigma"].data)
    if not np.all(np.isfinite(sigma_data)):
        raise NonFiniteError("slot sigma is not finite")
    H, W = F.shape[-2:]
    X = layer_norm(grid_to_tokens(F), p, prefix + "ln_in.")      # (..., HW, C)
    k = linear(X, p[prefix + "k.W"])
    v = linear(X, p[prefix + "v.W"])
    if noise is None:
        noise = slot_init_noise(seed, F.shape[:-3] + (K, D))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-2:] != (K, D):
        raise ValueError(f"slot noise must end in ({K}, {D}), got {noise.shape}")
    Z = p[prefix + "mu"] + exp(p[prefix + "log_sigma"]) * constant(noise)
    scale = 1.0 / np.sqrt(D)
    history = []
    A = None
    for _ in range(T):
        Z_prev = Z
        Zn = layer_norm(Z, p, prefix + "ln_slots.")
        q = linear(Zn, p[prefix + "q.W"])
        A = softmax_axis(matmul(k, q.swapaxes(-1, -2)) * scale, -1)   # (..., HW, K): over slots
        if check:
            s = A.data.sum(axis=-1)
            if not np.allclose(s, 1.0, atol=1e-6, rtol=0):
                raise AssertionError("slot-axis normalisation violated")
            history.append(A.data)
        U = weighted_mean(A, v, eps)
        Z = gru_cell(Z_prev, U, p, prefix + "gru.")
        h = gelu(linear(layer_norm(Z, p, prefix + "ln_mlp."), p[prefix + "mlp1.W"], p[prefix + "mlp1.b"]))
        Z = Z + linear(h, p[prefix + "mlp2.W"], p[prefix + "mlp2.b"])
    A_map = A.swapaxes(-1, -2).reshape(A.shape[:-2] + (K, H, W))
    return SlotState(Z, A_map, T, history)


def _grid_coords(H: int, W: int):
    ys = np.arange(H) / max(H - 1, 1)
    xs = np.arange(W) / max(W - 1, 1)
    return np.meshgrid(ys, xs, indexing="ij")


def slot_regularizer(state: SlotState, lam_div: float = 1.0, lam_cmp: float = 1.0) -> Tensor:
    """lam_div * mean_{i<j} max(0, cos(z_i, z_j))^2 + lam_cmp * mean_k spatial variance of A_k.

    Spatial variance uses normalised coordinates in [0, 1] around each map's centroid.
    Batched states are averaged over the leading axes.
    """
    Z, A = state.Z, state.A_map
    K = Z.shape[-2]
    H, W = A.shape[-2:]
    div = constant(0.0)
    if K > 1:
        norm = sqrt(tsum(Z * Z, axis=-1, keepdims=True) + 1e-12)
        u = Z / norm
        cos = matmul(u, u.swapaxes(-1, -2))                   # (..., K, K)
        iu = np.triu_indices(K, 1)
        pairs = cos[(Ellipsis,) + iu]
        div = (maximum(pairs, 0.0) ** 2).mean()
    yy, xx = _grid_coords(H, W)
    a = A / tsum(A, axis=(-2, -1), keepdims=True)
    cy = tsum(a * yy, axis=(-2, -1), keepdims=True)
    cx = tsum(a * xx, axis=(-2, -1), keepdims=True)
    var = tsum(a * ((constant(yy) - cy) ** 2 + (constant(xx) - cx) ** 2), axis=(-2, -1))
    return lam_div * div + lam_cmp * var.mean()


# ---------------------------------------------------------------- gradient-check composites

def _small_slot_params(rng, C=5, D=4):
    p = init_slots(rng, C, D)
    return {k: param(v.data + rng.normal(0, 0.1, v.shape)) for k, v in p.items()}


@register_composite("slot_attention")
def _gc_slots():
    rng = make_rng(21)
    p = _small_slot_params(rng)
    F = rng.normal(size=(5, 4, 4))
    noise = rng.normal(size=(2, 4))
    wz, wa = rng.normal(size=(2, 4)), rng.normal(size=(2, 4, 4))

    def f(q):
        st = slot_attention(F, 2, 2, q, noise=noise)
        return (st.Z * wz).sum() + (st.A_map * wa).sum()
    return f, p, None


@register_composite("slot_regularizer")
def _gc_slot_reg():
    rng = make_rng(22)
    p = _small_slot_params(rng)
    F = rng.normal(size=(5, 4, 4))
    noise = rng.normal(size=(2, 4))
    return (lambda q: slot_regularizer(slot_attention(F, 2, 2, q, noise=noise))), p, None
