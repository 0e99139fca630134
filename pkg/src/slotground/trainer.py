"""Model assembly and the three training stages.

Stage 1 aligns pooled 2D and point-cloud features with a symmetric InfoNCE loss
(momentum encoders plus a feature queue). Stage 2 trains everything end to end on
report NLL, two-hop segmentation and the slot regulariser. Stage 3 freezes the
model and updates only LoRA factors on the report heads with GRPO.

Frozen encoder outputs are computed once per scene (:class:`SceneCache`); the
cross-source swap has no parameters, so its output is cached too.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .fusion import adapter, bca_fuse, css, grid_to_tokens, init_adapter, init_bca, tokens_to_grid
from .grounding import MaskPair, hop1_select, hop2_decode, init_grounding, seg_loss
from .numkit import (Tensor, concat, constant, derive_seed, layer_norm, log_softmax, make_rng, matmul, param,
                     register_composite, serialize, softmax_axis, sqrt, tsum, value_and_grad)
from .report import (HEADS, Report, ReportPolicy, actions_from_report, init_text_embedding, text_feature,
                     validate_report)
from .rewards import (DEFAULT_WEIGHTS, EPS_ADV, EPS_CLIP, GROUP_SIZE, KL_BETA, RolloutGroup, RuleScorer,
                      grpo_loss, policy_kl, reward_consistency, score_report)
from .slots import SlotState, init_slots, slot_attention, slot_init_noise, slot_regularizer
from .synthdata import Encoders
from .vocab import CONF_BINS

log = logging.getLogger(__name__)

STAGES = ("PT", "SFT", "RFT")


@dataclass
class ModelConfig:
    width: int = 32
    grid: int = 16
    image_size: int = 32
    n_centers: int = 32
    knn: int = 16
    K: int = 4
    T: int = 3
    css_p: float = 0.25
    lora_rank: int = 8
    lora_scale: float = 1.0
    tau_g: float = 0.07
    use_slots: bool = True
    two_hop: bool = True
    use_bca: bool = True
    scene_norm: bool = True

    def __post_init__(self):
        if self.image_size % self.grid:
            raise ValueError("image_size must be a multiple of grid")
        if self.width < 2 or self.K < 1 or self.T < 1:
            raise ValueError("width >= 2, K >= 1 and T >= 1 are required")

    @property
    def patch(self) -> int:
        return self.image_size // self.grid

    @property
    def out_hw(self) -> tuple:
        return (self.image_size, self.image_size)

    @property
    def feat_width(self) -> int:
        return 3 * self.width


@dataclass
class TrainConfig:
    seed: int = 1
    # PT
    pt_steps: int = 200
    pt_batch: int = 64
    pt_lr: float = 0.1
    tau: float = 0.07
    momentum: float = 0.995
    queue: int = 256
    # SFT
    sft_max_steps: int = 600
    sft_batch: int = 16
    sft_lr: float = 0.03
    sft_eval_every: int = 100
    sft_dice_target: float = 0.7
    sft_auroc_target: float = 0.9
    lam_twohop: float = 1.0
    lam_dice: float = 1.0
    lam_bce: float = 1.0
    lam_slot: float = 0.1
    lam_div: float = 1.0
    lam_cmp: float = 1.0
    sft_frozen: tuple = ("pos_2d",)
    # RFT
    rft_steps: int = 300
    rft_batch: int = 8
    rft_lr: float = 0.5
    group_size: int = GROUP_SIZE
    eps_clip: float = EPS_CLIP
    beta: float = KL_BETA
    eps_adv: float = EPS_ADV
    reward_weights: tuple = DEFAULT_WEIGHTS
    r_g_use_gt: bool = False
    eval_samples: int = 4


# ---------------------------------------------------------------- params

def init_model(mcfg: ModelConfig, seed: int) -> dict:
    rng = make_rng(derive_seed(seed, "init"))
    d = mcfg.width
    p = {}
    p.update(init_adapter(rng, d, d, "adapter_2d."))
    p.update(init_adapter(rng, d, d, "adapter_3d."))
    p["pos_2d"] = param(rng.normal(0.0, 0.1, (mcfg.grid * mcfg.grid, d)))
    p.update(init_bca(rng, d))
    p.update(init_slots(rng, d, d))
    p.update(init_grounding(rng, d))
    p["pool.query"] = param(rng.normal(0.0, 1.0 / np.sqrt(d), d))
    p.update(make_policy(mcfg).init_params(rng))
    p.update(init_text_embedding(rng, d))
    return p


def make_policy(mcfg: ModelConfig) -> ReportPolicy:
    return ReportPolicy(mcfg.feat_width, mcfg.lora_rank, mcfg.lora_scale)


def gd_step(p: dict, grads: dict, lr: float) -> dict:
    """Plain gradient descent on the entries present in ``grads``."""
    out = dict(p)
    for n, g in grads.items():
        out[n] = param(p[n].data - lr * g)
    return out


# ---------------------------------------------------------------- cached frozen features

@dataclass
class SceneCache:
    """Stacked frozen inputs for a list of scenes."""
    h2d: np.ndarray           # (N, d, H, W) after the cross-source swap
    hpc: np.ndarray           # (N, M, d)
    masks: np.ndarray         # (N, H0, W0)
    has_mask: np.ndarray      # (N,) bool
    actions: np.ndarray       # (N, 4) ground-truth report actions
    labels: np.ndarray        # (N,)
    reports: list
    seeds: np.ndarray
    pc_xy: np.ndarray         # (N, M, 2) xy of each point-cloud token's centre

    def __len__(self):
        return len(self.reports)

    def subset(self, idx) -> "SceneCache":
        idx = np.asarray(idx, dtype=np.int64)
        return SceneCache(self.h2d[idx], self.hpc[idx], self.masks[idx], self.has_mask[idx],
                          self.actions[idx], self.labels[idx], [self.reports[i] for i in idx],
                          self.seeds[idx], self.pc_xy[idx])


def scene_standardize(h: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Standardise each channel of a (d, H, W) grid over its own spatial extent."""
    mu = h.mean(axis=(-2, -1), keepdims=True)
    return (h - mu) / np.sqrt(h.var(axis=(-2, -1), keepdims=True) + eps)


def prepare(scenes: list, mcfg: ModelConfig, encoders: Encoders | None = None) -> SceneCache:
    if not scenes:
        raise ValueError("no scenes to prepare")
    enc = encoders or Encoders(mcfg.width, mcfg.patch, mcfg.n_centers, mcfg.knn)
    h2d, hpc, xy, masks, has, acts = [], [], [], [], [], []
    for s in scenes:
        h_rgb, h_s = enc.encode_image(s.rgb), enc.encode_image(s.sensor)
        if mcfg.scene_norm:
            # each source standardised first so the mean fusion cannot cancel a one-sided defect
            h_rgb, h_s = scene_standardize(h_rgb), scene_standardize(h_s)
        h = css(h_rgb, h_s, mcfg.css_p).data
        h2d.append(scene_standardize(h) if mcfg.scene_norm else h)
        tok, centers = enc.encode_3d(s.points, return_centers=True)
        hpc.append(tok)
        xy.append(centers[:, :2])
        has.append(s.gt_mask is not None)
        masks.append(np.zeros(mcfg.out_hw) if s.gt_mask is None else s.gt_mask.astype(np.float64))
        acts.append(actions_from_report(s.gt_report))
    return SceneCache(np.stack(h2d), np.stack(hpc), np.stack(masks), np.array(has), np.stack(acts),
                      np.array([s.label for s in scenes]), [s.gt_report for s in scenes],
                      np.array([s.seed for s in scenes], dtype=np.uint64), np.stack(xy))


# ---------------------------------------------------------------- forward

@dataclass
class Backbone:
    z2d: Tensor        # (B, d, H, W)
    zpc: Tensor        # (B, M, d)
    state: SlotState
    feats: Tensor      # (B, 3d)


def slot_noise(seeds, mcfg: ModelConfig, tag) -> np.ndarray:
    return np.stack([slot_init_noise(derive_seed(int(s), "slots", tag), (mcfg.K, mcfg.width)) for s in seeds])


def _no_slot_state(z2d: Tensor) -> SlotState:
    B, d, H, W = z2d.shape
    Z = grid_to_tokens(z2d).mean(axis=-2, keepdims=True)
    return SlotState(Z, constant(np.ones((B, 1, H, W))), 0)


def with_position(h2d, p: dict) -> Tensor:
    """Frozen patch features plus the learned positional embedding, as a (B, d, H, W) grid."""
    h2d = constant(h2d)
    d, H, W = h2d.shape[-3:]
    return h2d + p["pos_2d"].T.reshape((d, H, W))


def slot_pool(Z: Tensor, p: dict) -> Tensor:
    """Attention pooling of the slots with a learned query."""
    w = softmax_axis(matmul(Z, p["pool.query"].reshape((-1, 1))) * (1.0 / np.sqrt(Z.shape[-1])), -2)
    return tsum(Z * w, axis=-2)


def backbone(p: dict, h2d, hpc, mcfg: ModelConfig, noise) -> Backbone:
    H = W = mcfg.grid
    tokens = grid_to_tokens(adapter(with_position(h2d, p), p, "2d"))
    apc = adapter(constant(hpc), p, "3d")
    if mcfg.use_bca:
        tokens, apc = bca_fuse(tokens, apc, p)
    z2d = tokens_to_grid(tokens, H, W)
    state = slot_attention(z2d, mcfg.K, mcfg.T, p, noise=noise) if mcfg.use_slots else _no_slot_state(z2d)
    # parameter-free norm keeps the report logits bounded while the backbone moves
    feats = layer_norm(concat([tokens.mean(axis=-2), slot_pool(state.Z, p), apc.mean(axis=-2)], axis=-1))
    return Backbone(z2d, apc, state, feats)


def ground_reports(p: dict, bb: Backbone, reports: list, mcfg: ModelConfig, detach_text: bool = True):
    """Two-hop grounding with each sample's own report text. Returns (Hop1Result, m_hat)."""
    t = text_feature(reports, p)
    if detach_text:
        t = t.detach()
    h1 = hop1_select(t, bb.state, mcfg.tau_g)
    return h1, hop2_decode(bb.z2d, h1, p, mcfg.out_hw, gates=mcfg.two_hop)


def lm_nll(lp: dict, actions) -> Tensor:
    """Per-sample sum of head NLLs, averaged over the batch."""
    actions = np.atleast_2d(actions)
    rows = np.arange(len(actions))
    total = None
    for i, h in enumerate(HEADS):
        term = -lp[h][rows, actions[:, i]].mean()
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- stage 1: contrastive pre-alignment

def l2_normalize(x) -> Tensor:
    return x / sqrt(tsum(x * x, axis=-1, keepdims=True) + 1e-12)


@dataclass
class MomentumState:
    ema: dict
    capacity: int = 256
    m: float = 0.995
    queue_2d: list = field(default_factory=list)
    queue_pc: list = field(default_factory=list)
    queue_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ValueError(f"momentum coefficient {self.m} outside [0, 1]")

    def enqueue(self, k2d, kpc, ids) -> None:
        for a, b, i in zip(np.atleast_2d(k2d), np.atleast_2d(kpc), np.atleast_1d(ids)):
            self.queue_2d.append(np.array(a))
            self.queue_pc.append(np.array(b))
            self.queue_ids.append(int(i))
        over = len(self.queue_ids) - self.capacity
        if over > 0:
            del self.queue_2d[:over], self.queue_pc[:over], self.queue_ids[:over]

    def negatives(self, modality: str, exclude_ids=()) -> np.ndarray:
        q = self.queue_2d if modality == "2d" else self.queue_pc
        ex = set(int(i) for i in np.atleast_1d(exclude_ids))
        keep = [v for v, i in zip(q, self.queue_ids) if i not in ex]
        width = q[0].shape[-1] if q else 0
        return np.stack(keep) if keep else np.zeros((0, width))

    def __len__(self):
        return len(self.queue_ids)


def momentum_update(online: dict, ema: dict, m: float) -> dict:
    if set(online) != set(ema):
        raise ValueError(f"momentum schema mismatch: {sorted(set(online) ^ set(ema))}")
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum coefficient {m} outside [0, 1]")
    out = {}
    for n in ema:
        a, b = np.asarray(getattr(ema[n], "data", ema[n])), np.asarray(getattr(online[n], "data", online[n]))
        if a.shape != b.shape:
            raise ValueError(f"momentum shape mismatch for {n}: {a.shape} vs {b.shape}")
        out[n] = constant(m * a + (1.0 - m) * b)
    return out


def _check_unit_rows(x: Tensor, name: str):
    norms = np.sqrt((x.data ** 2).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError(f"{name} rows must be l2-normalised (max deviation {np.abs(norms - 1).max():.2e})")


def _nce_direction(q: Tensor, keys: Tensor, queue: np.ndarray, tau: float) -> Tensor:
    logits = matmul(q, keys.T) * (1.0 / tau)
    if len(queue):
        logits = concat([logits, matmul(q, constant(queue).T) * (1.0 / tau)], axis=-1)
    lp = log_softmax(logits, axis=-1)
    n = q.shape[0]
    return -lp[np.arange(n), np.arange(n)].mean()


def infonce_symmetric(h2d, hpc, tau: float = 0.07, mstate: MomentumState | None = None, ids=None) -> Tensor:
    """0.5 * (L_2D->PC + L_PC->2D) with diagonal positives; queued features join the negatives.

    Queue entries sharing an id with a batch row are left out so that an instance
    is never its own negative.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    h2d, hpc = (x if isinstance(x, Tensor) else constant(x) for x in (h2d, hpc))
    _check_unit_rows(h2d, "h2d")
    _check_unit_rows(hpc, "hpc")
    if h2d.shape != hpc.shape:
        raise ValueError(f"InfoNCE pair shape mismatch {h2d.shape} vs {hpc.shape}")
    ids = np.arange(h2d.shape[0]) if ids is None else ids
    q_pc = mstate.negatives("pc", ids) if mstate is not None else np.zeros((0, h2d.shape[1]))
    q_2d = mstate.negatives("2d", ids) if mstate is not None else np.zeros((0, h2d.shape[1]))
    return 0.5 * (_nce_direction(h2d, hpc, q_pc, tau) + _nce_direction(hpc, h2d, q_2d, tau))


PT_PREFIXES = ("adapter_2d.", "adapter_3d.", "pos_2d")
PT_BINS = 3


def pt_names(p: dict) -> list:
    return [n for n in p if n.startswith(PT_PREFIXES)]


def bin_weights(xy: np.ndarray, nb: int = PT_BINS) -> np.ndarray:
    """(..., L, 2) coordinates in [0, 1] -> (..., L, nb*nb) weights averaging each spatial bin."""
    b = np.minimum((np.asarray(xy) * nb).astype(int), nb - 1)
    k = b[..., 1] * nb + b[..., 0]
    m = np.zeros(k.shape + (nb * nb,))
    np.put_along_axis(m, k[..., None], 1.0, axis=-1)
    return m / np.maximum(m.sum(axis=-2, keepdims=True), 1.0)


def grid_xy(H: int, W: int) -> np.ndarray:
    """Cell-centre coordinates of an H x W grid in token order, (H*W, 2) as (x, y)."""
    ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def batch_standardize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Centre and scale every column by the statistics of the rows present."""
    xc = x - x.mean(axis=0, keepdims=True)
    return xc / sqrt((xc * xc).mean(axis=0, keepdims=True) + eps)


def pt_embed(p: dict, h2d, hpc, pc_xy, nb: int = PT_BINS) -> tuple:
    """Alignment embeddings for a batch of pairs.

    Adapter outputs of both modalities are averaged over the same nb x nb bins of
    the unit square (2D tokens by cell centre, point tokens by their centre's xy),
    concatenated, standardised over the batch and l2-normalised.
    """
    n = len(h2d)
    t2 = grid_to_tokens(adapter(with_position(h2d, p), p, "2d"))
    tp = adapter(constant(hpc), p, "3d")
    w2 = constant(bin_weights(grid_xy(*np.shape(h2d)[-2:]), nb).T)
    wp = constant(np.swapaxes(bin_weights(pc_xy, nb), -1, -2))
    e2 = matmul(w2, t2).reshape((n, -1))
    ep = matmul(wp, tp).reshape((n, -1))
    if n > 1:
        e2, ep = batch_standardize(e2), batch_standardize(ep)
    return l2_normalize(e2), l2_normalize(ep)


def retrieval_top1(p: dict, cache: SceneCache) -> float:
    e2, ep = pt_embed(p, cache.h2d, cache.hpc, cache.pc_xy)
    sim = e2.data @ ep.data.T
    return float(np.mean(sim.argmax(axis=1) == np.arange(len(sim))))


@dataclass
class StageResult:
    params: dict
    history: list
    metrics: dict


def pretrain(p: dict, cache: SceneCache, tcfg: TrainConfig, log_every: int = 0) -> StageResult:
    names = pt_names(p)
    rng = make_rng(derive_seed(tcfg.seed, "pt"))
    ms = MomentumState({n: constant(p[n].data) for n in names}, tcfg.queue, tcfg.momentum)
    history = []
    N = len(cache)
    order = rng.permutation(N)
    pos = 0
    for step in range(tcfg.pt_steps):
        if pos + tcfg.pt_batch > N:
            order, pos = rng.permutation(N), 0
        idx = order[pos:pos + min(tcfg.pt_batch, N)]
        pos += len(idx)
        h2d, hpc, xy = cache.h2d[idx], cache.hpc[idx], cache.pc_xy[idx]

        def f(q):
            e2, ep = pt_embed(q, h2d, hpc, xy)
            return infonce_symmetric(e2, ep, tcfg.tau, ms, idx)
        loss, g = value_and_grad(f, p, names)
        p = gd_step(p, g, tcfg.pt_lr)
        ms.ema = momentum_update({n: p[n] for n in names}, ms.ema, ms.m)
        k2, kp = pt_embed({**p, **ms.ema}, h2d, hpc, xy)
        ms.enqueue(k2.data, kp.data, idx)
        history.append(loss)
        if log_every and step % log_every == 0:
            log.info("pt step %d loss %.4f", step, loss)
    return StageResult(p, history, {"retrieval_top1": retrieval_top1(p, cache), "final_loss": history[-1]})


# ---------------------------------------------------------------- stage 2: supervised fine-tuning

@dataclass
class SFTLoss:
    total: float
    lm: float
    seg: float
    slot: float


def sft_objective(p: dict, batch: SceneCache, mcfg: ModelConfig, tcfg: TrainConfig, noise,
                  parts: dict | None = None, detach_text: bool = True) -> Tensor:
    policy = make_policy(mcfg)
    bb = backbone(p, batch.h2d, batch.hpc, mcfg, noise)
    lm = lm_nll(policy.log_probs(p, bb.feats), batch.actions)
    total = lm
    seg = slot = constant(0.0)
    sel = np.flatnonzero(batch.has_mask)
    if tcfg.lam_twohop > 0 and len(sel):
        _, m_hat = ground_reports(p, bb, batch.reports, mcfg, detach_text)
        seg = seg_loss(m_hat[sel], batch.masks[sel], tcfg.lam_dice, tcfg.lam_bce)
        total = total + tcfg.lam_twohop * seg
    if tcfg.lam_slot > 0 and mcfg.use_slots:
        slot = slot_regularizer(bb.state, tcfg.lam_div, tcfg.lam_cmp)
        total = total + tcfg.lam_slot * slot
    if parts is not None:
        parts.update(lm=lm.item(), seg=seg.item(), slot=slot.item())
    return total


def sft_step(p: dict, batch: SceneCache, mcfg: ModelConfig, tcfg: TrainConfig, step: int = 0):
    """One gradient-descent step on every trainable parameter. Returns (params, SFTLoss)."""
    if len(batch) == 0:
        raise ValueError("empty SFT batch")
    noise = slot_noise(batch.seeds, mcfg, ("sft", step))
    parts = {}
    names = [n for n in p if not n.startswith(tuple(tcfg.sft_frozen))]
    loss, g = value_and_grad(lambda q: sft_objective(q, batch, mcfg, tcfg, noise, parts), p, names)
    return gd_step(p, g, tcfg.sft_lr), SFTLoss(loss, parts["lm"], parts["seg"], parts["slot"])


def sft(p: dict, train: SceneCache, evalset: SceneCache, mcfg: ModelConfig, tcfg: TrainConfig,
        stop_on_target: bool = True) -> StageResult:
    """Train until the eval Dice and P-AUROC targets are met or ``sft_max_steps`` runs out."""
    from .metrics import evaluate
    rng = make_rng(derive_seed(tcfg.seed, "sft"))
    history, metrics = [], {}
    N = len(train)
    order, pos = rng.permutation(N), 0
    for step in range(tcfg.sft_max_steps):
        if pos + tcfg.sft_batch > N:
            order, pos = rng.permutation(N), 0
        idx = order[pos:pos + min(tcfg.sft_batch, N)]
        pos += len(idx)
        p, loss = sft_step(p, train.subset(idx), mcfg, tcfg, step)
        history.append(asdict(loss))
        if (step + 1) % tcfg.sft_eval_every == 0 or step + 1 == tcfg.sft_max_steps:
            metrics = evaluate(p, evalset, mcfg, samples=0).summary
            metrics["step"] = step + 1
            log.info("sft step %d loss %.4f dice %.3f p-auroc %.3f", step + 1, loss.total,
                     metrics["dice"], metrics["p_auroc"])
            if stop_on_target and metrics["dice"] >= tcfg.sft_dice_target \
                    and metrics["p_auroc"] >= tcfg.sft_auroc_target:
                break
    return StageResult(p, history, metrics)


# ---------------------------------------------------------------- stage 3: GRPO on LoRA factors

def split_lora(p: dict) -> tuple:
    base = {n: v for n, v in p.items() if not n.startswith("lora.")}
    lora = {n: v for n, v in p.items() if n.startswith("lora.")}
    return base, lora


def freeze(p: dict) -> dict:
    return {n: constant(v.data) for n, v in p.items()}


def add_lora(p: dict, mcfg: ModelConfig, seed: int) -> dict:
    rng = make_rng(derive_seed(seed, "lora"))
    return {**freeze(p), **make_policy(mcfg).init_lora(rng)}


class FrozenModel:
    """Backbone outputs and per-(scene, report) groundings of a frozen model, computed on demand."""

    def __init__(self, p: dict, cache: SceneCache, mcfg: ModelConfig, tag="frozen"):
        self.p, self.cache, self.mcfg = p, cache, mcfg
        self.bb = backbone(p, cache.h2d, cache.hpc, mcfg, slot_noise(cache.seeds, mcfg, tag))
        self._ground: dict = {}

    @property
    def feats(self) -> np.ndarray:
        return self.bb.feats.data

    def masks(self, i: int, r: Report) -> MaskPair:
        key = (i, r.defect_type, r.defect_location, r.reasoning)
        if key not in self._ground:
            st = SlotState(constant(self.bb.state.Z.data[i]), constant(self.bb.state.A_map.data[i]), 0)
            h1 = hop1_select(text_feature(r, self.p).detach(), st, self.mcfg.tau_g)
            m_hat = hop2_decode(constant(self.bb.z2d.data[i]), h1, self.p, self.mcfg.out_hw, self.mcfg.two_hop)
            self._ground[key] = MaskPair(h1.m_slot.data, m_hat.data)
        return self._ground[key]


@dataclass
class StageCheckpoint:
    stage: str
    params: dict              # name -> ndarray
    step: int
    config_hash: str
    opt_state: dict = field(default_factory=dict)
    lora_names: tuple = ()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        self.params = {n: np.asarray(getattr(v, "data", v), dtype=np.float64) for n, v in self.params.items()}

    def as_params(self, trainable: bool = True) -> dict:
        make = param if trainable else constant
        return {n: make(v) for n, v in self.params.items()}

    def save(self, path) -> None:
        tensors = dict(self.params)
        tensors.update({f"opt/{k}": np.asarray(v) for k, v in self.opt_state.items()})
        manifest = {"stage": self.stage, "step": self.step, "config_hash": self.config_hash,
                    "lora": sorted(self.lora_names),
                    "base": sorted(n for n in self.params if n not in self.lora_names)}
        serialize.save_archive(path, tensors, manifest)

    @classmethod
    def load(cls, path, expect_hash: str | None = None) -> "StageCheckpoint":
        tensors, manifest = serialize.load_archive(path)
        if expect_hash is not None and manifest["config_hash"] != expect_hash:
            raise ValueError(f"checkpoint config hash {manifest['config_hash']} != run hash {expect_hash}")
        params = {n: v.astype(np.float64) for n, v in tensors.items() if not n.startswith("opt/")}
        opt = {n[4:]: v for n, v in tensors.items() if n.startswith("opt/")}
        return cls(manifest["stage"], params, manifest["step"], manifest["config_hash"], opt,
                   tuple(manifest.get("lora", ())))


def corrupt_policy(p: dict, invalid_logit: float = 0.5, reasoning_blur: float = 0.15) -> dict:
    """Damage the report heads of an SFT model.

    The overflow confidence bin (value 1.5, outside [0, 1]) becomes a copy of the
    1.0 bin shifted up by ``invalid_logit``, so wherever the model is confident it
    emits the invalid value with probability sigmoid(invalid_logit). The reasoning
    head's weights are shrunk towards uniform so that its template often disagrees
    with the type head.
    """
    out = dict(p)
    W = p["policy.confidence.W"].data.copy()
    overflow = len(CONF_BINS) - 1
    top = int(np.argmin(np.abs(np.asarray(CONF_BINS[:overflow]) - 1.0)))
    W[overflow] = W[top]
    W[overflow, -1] += invalid_logit
    out["policy.confidence.W"] = constant(W)
    out["policy.reasoning.W"] = constant(p["policy.reasoning.W"].data * reasoning_blur)
    return out


@dataclass
class RFTStepMetrics:
    mean_reward: float
    schema_rate: float
    mean_kl: float
    mean_r_c: float


def rft_step(p: dict, frozen: FrozenModel, ref: StageCheckpoint | None, mcfg: ModelConfig,
             tcfg: TrainConfig, idx, rng, scorer=None, lr: float | None = None):
    """Sample G reports per query, score, normalise within groups, one GD step on LoRA only."""
    if ref is None:
        raise ValueError("rft_step needs a reference checkpoint")
    policy = make_policy(mcfg)
    _, lora = split_lora(p)
    if not lora:
        raise ValueError("no LoRA parameters to train")
    if any(v.requires_grad for n, v in p.items() if n not in lora):
        raise ValueError("base parameters must be frozen during RFT")
    feats = frozen.feats[np.asarray(idx)]
    ref_p = ref.as_params(trainable=False)
    lp_ref = {h: v.data for h, v in policy.log_probs(ref_p, feats).items()}
    lp_old = {h: v.data for h, v in policy.log_probs(p, feats).items()}
    G = tcfg.group_size
    groups, rewards, valid, rcs = [], [], [], []
    for qi, i in enumerate(idx):
        row = {h: np.repeat(lp_old[h][qi:qi + 1], G, axis=0) for h in HEADS}
        acts = np.stack([_sample(row[h], rng) for h in HEADS], axis=-1)
        reports = [_render(a) for a in acts]
        bds = []
        for r in reports:
            gt = frozen.cache.masks[i] if tcfg.r_g_use_gt else None
            bds.append(score_report(r, frozen.masks(int(i), r), scorer, tcfg.reward_weights, gt))
        g = RolloutGroup(reports, acts, {}, {h: lp_old[h][qi] for h in HEADS},
                         {h: lp_ref[h][qi] for h in HEADS}, bds)
        g.normalize(tcfg.eps_adv)
        groups.append((qi, g))
        rewards += [b.total for b in bds]
        valid += [b.r_f for b in bds]
        rcs += [b.r_c for b in bds]

    def f(q):
        lp = policy.log_probs(q, feats)
        total = None
        for qi, g in groups:
            g.head_lp = {h: lp[h][qi] for h in HEADS}
            term = grpo_loss(g, tcfg.eps_clip, tcfg.beta)
            total = term if total is None else total + term
        return total * (1.0 / len(groups))
    loss, grads = value_and_grad(f, p, sorted(lora))
    kl = policy_kl({h: v for h, v in policy.log_probs(p, feats).items()}, lp_ref).item()
    p = gd_step(p, grads, tcfg.rft_lr if lr is None else lr)
    return p, RFTStepMetrics(float(np.mean(rewards)), float(np.mean(valid)), kl, float(np.mean(rcs)))


def _sample(logp: np.ndarray, rng) -> np.ndarray:
    cum = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random(len(logp))[:, None] * cum[:, -1:]
    return np.minimum((cum < u).sum(axis=-1), logp.shape[-1] - 1)


def _render(a) -> Report:
    from .report import render_actions
    return render_actions(a)


def sampled_report_stats(p: dict, frozen: FrozenModel, mcfg: ModelConfig, n_samples: int, seed: int,
                         scorer=None) -> dict:
    """Schema rate and mean R_C over ``n_samples`` sampled reports per scene."""
    policy = make_policy(mcfg)
    rng = make_rng(seed)
    lp = {h: v.data for h, v in policy.log_probs(p, frozen.feats).items()}
    valid, rcs = [], []
    for i in range(len(frozen.cache)):
        row = {h: np.repeat(lp[h][i:i + 1], n_samples, axis=0) for h in HEADS}
        acts = np.stack([_sample(row[h], rng) for h in HEADS], axis=-1)
        for a in acts:
            r = _render(a)
            valid.append(validate_report(r)[0])
            rcs.append(reward_consistency(r, scorer))
    return {"schema_rate": float(np.mean(valid)), "r_c": float(np.mean(rcs))}


def rft(p: dict, ref: StageCheckpoint, train: SceneCache, evalset: SceneCache, mcfg: ModelConfig,
        tcfg: TrainConfig, scorer=None, frozen_train: FrozenModel | None = None,
        frozen_eval: FrozenModel | None = None) -> StageResult:
    scorer = RuleScorer() if scorer is None else scorer
    base, _ = split_lora(p)
    frozen_train = frozen_train or FrozenModel(base, train, mcfg)
    frozen_eval = frozen_eval or FrozenModel(base, evalset, mcfg)
    eval_seed = derive_seed(tcfg.seed, "rft-eval")
    before = sampled_report_stats(p, frozen_eval, mcfg, tcfg.eval_samples, eval_seed, scorer)
    rng = make_rng(derive_seed(tcfg.seed, "rft"))
    history = []
    N = len(train)
    for step in range(tcfg.rft_steps):
        idx = rng.choice(N, size=min(tcfg.rft_batch, N), replace=False)
        p, m = rft_step(p, frozen_train, ref, mcfg, tcfg, idx, rng, scorer)
        history.append(asdict(m))
    after = sampled_report_stats(p, frozen_eval, mcfg, tcfg.eval_samples, eval_seed, scorer)
    metrics = {"schema_before": before["schema_rate"], "schema_after": after["schema_rate"],
               "r_c_before": before["r_c"], "r_c_after": after["r_c"],
               "mean_kl": history[-1]["mean_kl"] if history else 0.0}
    return StageResult(p, history, metrics)


# ---------------------------------------------------------------- gradient-check composite

@register_composite("infonce")
def _gc_infonce():
    rng = make_rng(51)
    p = {"a": param(rng.normal(size=(3, 4))), "b": param(rng.normal(size=(3, 4)))}
    ms = MomentumState({}, 4)
    ms.enqueue(l2_normalize(constant(rng.normal(size=(2, 4)))).data,
               l2_normalize(constant(rng.normal(size=(2, 4)))).data, [10, 11])
    return (lambda q: infonce_symmetric(l2_normalize(q["a"]), l2_normalize(q["b"]), 0.5, ms)), p, None
