"""Language-guided two-hop grounding and the Dice + BCE segmentation loss.

Hop 1 scores each slot against the text feature by cosine similarity, mixes the
slot vectors and their attention maps with the resulting weights and min-max
normalises the mixed map into a coarse support map. Hop 2 gates the feature grid
channel-wise (from the mixed slot vector) and spatially (from the support map),
then a small convolutional head decodes the dense mask.

All functions accept optional leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import (Tensor, astensor, bilinear_upsample, clip, constant, conv2d, gelu, log, make_rng,
                     matmul, param, register_composite, sigmoid, softmax_axis, sqrt, tanh, tsum, where)
from .slots import SlotState

TAU_G = 0.07
DICE_SMOOTH = 1.0
BCE_CLAMP = 1e-7
ALPHA_INIT = 0.5
_NORM_FLOOR = 1e-12


@dataclass
class Hop1Result:
    w: Tensor          # (..., K)
    z_bar: Tensor      # (..., D)
    m_slot: Tensor     # (..., H, W) in [0, 1]


@dataclass
class MaskPair:
    m_slot: np.ndarray     # (H, W)
    m_hat: np.ndarray      # (H0, W0)

    def __post_init__(self):
        for name in ("m_slot", "m_hat"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.size and (a.min() < 0.0 or a.max() > 1.0):
                raise ValueError(f"{name} leaves [0, 1]")
            setattr(self, name, a)


def init_grounding(rng, width: int, text_width: int | None = None, prefix: str = "ground.") -> dict:
    """W_c, the two gate strengths and the 3x3 conv decoder (C -> C/2 -> 1)."""
    text_width = width if text_width is None else text_width
    half = max(width // 2, 1)
    return {
        prefix + "W_c": param(rng.normal(0.0, 1.0 / np.sqrt(text_width), (width, text_width))),
        prefix + "alpha_c": param(np.array(ALPHA_INIT)),
        prefix + "alpha_s": param(np.array(ALPHA_INIT)),
        prefix + "seg1.W": param(rng.normal(0.0, 1.0 / np.sqrt(9 * width), (half, width, 3, 3))),
        prefix + "seg1.b": param(np.zeros(half)),
        prefix + "seg2.W": param(rng.normal(0.0, 1.0 / np.sqrt(9 * half), (1, half, 3, 3))),
        prefix + "seg2.b": param(np.zeros(1)),
    }


def cosine_rows(t, Z) -> Tensor:
    """cos(t, z_k) for every slot: t (..., D), Z (..., K, D) -> (..., K)."""
    t, Z = astensor(t), astensor(Z)
    if t.shape[-1] != Z.shape[-1]:
        raise ValueError(f"text width {t.shape[-1]} != slot width {Z.shape[-1]}")
    tn2 = tsum(t * t, axis=-1, keepdims=True)
    zn2 = tsum(Z * Z, axis=-1)
    if np.any(tn2.data <= _NORM_FLOOR) or np.any(zn2.data <= _NORM_FLOOR):
        raise ValueError("cosine undefined for a zero-norm text or slot vector")
    dots = tsum(Z * t.reshape(t.shape[:-1] + (1, t.shape[-1])), axis=-1)
    return dots / (sqrt(zn2) * sqrt(tn2))


def minmax_normalize(m) -> Tensor:
    """Min-max to [0, 1] over the last two axes; constant maps become all zeros."""
    m = astensor(m)
    H, W = m.shape[-2:]
    lead = m.shape[:-2]
    flat = m.reshape((-1, H * W))
    rows = np.arange(flat.shape[0])
    lo = flat[rows, flat.data.argmin(axis=-1)].reshape((-1, 1))
    hi = flat[rows, flat.data.argmax(axis=-1)].reshape((-1, 1))
    const = (hi.data - lo.data) <= _NORM_FLOOR
    span = (hi - lo) + constant(const.astype(float))
    out = where(np.broadcast_to(const, flat.shape), constant(np.zeros(flat.shape)), (flat - lo) / span)
    return out.reshape(lead + (H, W))


def hop1_select(t, state: SlotState, tau_g: float = TAU_G) -> Hop1Result:
    if tau_g <= 0:
        raise ValueError(f"tau_g must be positive, got {tau_g}")
    Z, A = state.Z, state.A_map
    w = softmax_axis(cosine_rows(t, Z) * (1.0 / tau_g), -1)                 # (..., K)
    z_bar = matmul(w.reshape(w.shape[:-1] + (1, w.shape[-1])), Z)            # (..., 1, D)
    z_bar = z_bar.reshape(z_bar.shape[:-2] + (Z.shape[-1],))
    K, H, W = A.shape[-3:]
    mixed = matmul(w.reshape(w.shape[:-1] + (1, K)), A.reshape(A.shape[:-3] + (K, H * W)))
    m_slot = minmax_normalize(mixed.reshape(A.shape[:-3] + (H, W)))
    return Hop1Result(w, z_bar, m_slot)


def hop2_decode(F, h1: Hop1Result, p: dict, out_hw: tuple | None = None, gates: bool = True,
                prefix: str = "ground.", return_logits: bool = False):
    """Gate F with g_c = 1 + a_c tanh(W_c z_bar) and g_s = 1 + a_s m_slot, decode, upsample, squash.

    ``gates=False`` feeds the ungated grid to the decoder (the one-hop control).
    """
    F = astensor(F)
    C, H, W = F.shape[-3:]
    H0, W0 = (H, W) if out_hw is None else out_hw
    if gates:
        gc = 1.0 + p[prefix + "alpha_c"] * tanh(matmul(astensor(h1.z_bar), p[prefix + "W_c"].T))
        gs = 1.0 + p[prefix + "alpha_s"] * astensor(h1.m_slot)
        F = F * gc.reshape(gc.shape[:-1] + (C, 1, 1)) * gs.reshape(gs.shape[:-2] + (1, H, W))
    hidden = gelu(conv2d(F, p[prefix + "seg1.W"], p[prefix + "seg1.b"]))
    L = conv2d(hidden, p[prefix + "seg2.W"], p[prefix + "seg2.b"])
    L = bilinear_upsample(L.reshape(L.shape[:-3] + (H, W)), H0, W0)
    m_hat = sigmoid(L)
    return (m_hat, L) if return_logits else m_hat


def soft_dice(p, q, s: float = DICE_SMOOTH) -> Tensor:
    """(2 sum pq + s) / (sum p + sum q + s) over the last two axes."""
    p, q = astensor(p), astensor(q)
    if p.shape != q.shape:
        raise ValueError(f"soft_dice shape mismatch {p.shape} vs {q.shape}")
    ax = (-2, -1)
    return (2.0 * tsum(p * q, axis=ax) + s) / (tsum(p, axis=ax) + tsum(q, axis=ax) + s)


def seg_loss(m_hat, m_star, lam_dice: float = 1.0, lam_bce: float = 1.0, s: float = DICE_SMOOTH) -> Tensor:
    """lam_dice * (1 - soft Dice) + lam_bce * mean BCE, predictions clamped for the BCE."""
    m_hat = astensor(m_hat)
    target = np.asarray(m_star, dtype=np.float64)
    if target.shape != m_hat.shape:
        raise ValueError(f"seg_loss shape mismatch {m_hat.shape} vs {target.shape}")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValueError("seg_loss target mask must be binary")
    dice = soft_dice(m_hat, constant(target), s).mean()
    pc = clip(m_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = -(constant(target) * log(pc) + constant(1.0 - target) * log(1.0 - pc)).mean()
    return lam_dice * (1.0 - dice) + lam_bce * bce


def ground(F, t, state: SlotState, p: dict, out_hw=None, tau_g: float = TAU_G, gates: bool = True):
    """Both hops: returns (Hop1Result, m_hat)."""
    h1 = hop1_select(t, state, tau_g)
    return h1, hop2_decode(F, h1, p, out_hw, gates)


def export_heatmaps(directory, pair: MaskPair, slot_maps: np.ndarray | None = None) -> None:
    """Write m_slot / m_hat (and optionally each slot map) as 16-bit PGM files."""
    from .synthdata import write_pgm
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "m_slot.pgm", pair.m_slot)
    write_pgm(d / "m_hat.pgm", pair.m_hat)
    if slot_maps is not None:
        for k, a in enumerate(np.asarray(slot_maps)):
            write_pgm(d / f"slot_{k}.pgm", a / max(float(a.max()), 1e-12))


# ---------------------------------------------------------------- gradient-check composites

@register_composite("two_hop")
def _gc_two_hop():
    rng = make_rng(31)
    C, H, W, K = 4, 4, 4, 2
    p = init_grounding(rng, C)
    p = {k: param(v.data + rng.normal(0, 0.1, v.shape)) for k, v in p.items()}
    F = rng.normal(size=(C, H, W))
    A = rng.dirichlet(np.ones(K), size=H * W).T.reshape(K, H, W)
    state = SlotState(constant(rng.normal(size=(K, C))), constant(A), 1)
    t = rng.normal(size=C)
    target = (rng.random((6, 6)) > 0.5).astype(float)
    return (lambda q: seg_loss(ground(F, t, state, q, (6, 6))[1], target)), p, None


@register_composite("seg_loss")
def _gc_seg_loss():
    rng = make_rng(32)
    p = {"logits": param(rng.normal(size=(2, 2)))}
    target = np.array([[1.0, 0.0], [1.0, 1.0]])
    return (lambda q: seg_loss(sigmoid(q["logits"]), target)), p, None
