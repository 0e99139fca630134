"""Executable acceptance criteria.

Each ``check_*`` function returns ``(passed, detail)``. :func:`run_all` times them,
prints one line per criterion and returns :class:`CriterionResult` records; the
``eval --assert`` command and ``tests/test_acceptance.py`` both go through it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from . import fusion, grounding, rewards, slots, trainer  # noqa: F401  registers the gradient composites
from .config import RunConfig
from .fusion import bca_fuse, channel_exchange, init_bca
from .grounding import hop1_select, hop2_decode, init_grounding, minmax_normalize, seg_loss
from .metrics import align_iou, auroc, dice_iou, evaluate
from .numkit import REGISTRY, check_grad, constant, finite_difference, grad, make_rng, param
from .report import Report, init_text_embedding, rouge_l
from .report.text import pooling_matrix
from .report.policy import render_actions
from .rewards import (RolloutGroup, RuleScorer, clipped_surrogate, group_normalize, grpo_loss, reward_consistency,
                      reward_format, reward_grounding)
from .slots import SlotState, init_slots, slot_attention, weighted_mean
from .synthdata import GenConfig, make_scenes
from .trainer import (FrozenModel, ModelConfig, StageCheckpoint, TrainConfig, add_lora, backbone, freeze,
                      init_model, make_policy, prepare, rft_step, sft_objective, sft_step, slot_noise,
                      split_lora)
from .vocab import CONF_BINS, N_CELLS, TYPE_VOCAB


@dataclass
class CriterionResult:
    id: int
    name: str
    passed: bool
    detail: dict
    seconds: float

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "passed": self.passed, "detail": self.detail,
                "seconds": round(self.seconds, 3)}

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.id}. {self.name} ({self.seconds:.1f}s)"


# tiny shapes shared by the checks that need a whole model
TINY_GEN = GenConfig(image_size=8, grid=4, defect_size=(1, 4), n_points=(64, 96))
TINY_MODEL = ModelConfig(width=8, grid=4, image_size=8, n_centers=8, knn=4, K=2, T=2, lora_rank=2)


def tiny_setup(n: int = 6, seed: int = 0, gen: GenConfig = TINY_GEN, mcfg: ModelConfig = TINY_MODEL):
    cache = prepare(make_scenes(gen, seed, n), mcfg)
    return cache, init_model(mcfg, seed)


# ---------------------------------------------------------------- 1. gradient oracle

def check_gradients(budget_s: float = 120.0, tol: float = 1e-3):
    t0 = time.perf_counter()
    errors = {}
    for name, build in REGISTRY.items():
        f, p, names = build()
        errors[name] = check_grad(f, p, names).max_error
    seconds = time.perf_counter() - t0
    expected = {"adapter", "bca", "slot_attention", "two_hop", "seg_loss", "infonce", "grpo_surrogate"}
    passed = expected <= set(errors) and max(errors.values()) < tol and seconds < budget_s
    return passed, {"max_rel_error": errors, "seconds": seconds}


# ---------------------------------------------------------------- 2. slot attention

def check_slot_attention():
    rng = make_rng(2)
    C, D, H, W = 5, 4, 4, 4
    p = init_slots(rng, C, D)
    F = rng.normal(size=(C, H, W))
    noise = rng.normal(size=(3, D))
    st = slot_attention(F, 3, 3, p, noise=noise, check=True)
    axis_err = max(float(np.abs(a.sum(axis=-1) - 1.0).max()) for a in st.attn_history)

    one = slot_attention(F, 1, 2, p, noise=noise[:1])
    single_exact = bool(np.array_equal(one.A_map.data, np.ones((1, H, W))))
    V = rng.normal(size=(H * W, D))
    u = weighted_mean(np.ones((H * W, 1)), V).data[0]
    mean_err = float(np.abs(u - V.mean(axis=0)).max())

    perm = np.array([2, 0, 1])
    sp = slot_attention(F, 3, 3, p, noise=noise[perm])
    equivariant = bool(np.array_equal(sp.Z.data, st.Z.data[perm]) and np.array_equal(sp.A_map.data, st.A_map.data[perm]))
    passed = axis_err <= 1e-6 and single_exact and mean_err < 1e-12 and equivariant
    return passed, {"slot_axis_error": axis_err, "k1_attention_all_ones": single_exact, "k1_mean_error": mean_err,
                    "permutation_exact": equivariant}


# ---------------------------------------------------------------- 3. two-hop grounding

def _grounding_fixture(rng, C=4, H=4, W=4, K=2):
    p = init_grounding(rng, C)
    p.update(init_text_embedding(rng, C))
    F = rng.normal(size=(C, H, W))
    A = rng.dirichlet(np.ones(K), size=H * W).T.reshape(K, H, W)
    state = SlotState(constant(rng.normal(size=(K, C))), constant(A), 1)
    return p, F, state


def check_two_hop():
    rng = make_rng(3)
    p, F, state = _grounding_fixture(rng)
    t = rng.normal(size=4)
    h1 = hop1_select(t, state)
    q = dict(p)
    q["ground.alpha_c"] = constant(np.array(0.0))
    q["ground.alpha_s"] = constant(np.array(0.0))
    gate_identity = bool(np.array_equal(hop2_decode(F, h1, q, (6, 6)).data,
                                        hop2_decode(F, h1, q, (6, 6), gates=False).data))

    Z = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    st = SlotState(constant(Z), constant(np.ones((2, 4, 4)) * 0.5), 1)
    top = float(hop1_select(np.array([2.0, 0.0, 0.0, 0.0]), st, 0.07).w.data.max())

    # detach contract: with the text feature detached, the full SFT loss sends no gradient into the
    # text embedding, and that matches central differences of the loss with the segmentation term off
    cache, params = tiny_setup(4, seed=3)
    mcfg = TINY_MODEL
    noise = slot_noise(cache.seeds, mcfg, "detach")
    pe = freeze(params)
    pe["text.embed"] = param(params["text.embed"].data)
    on, off = TrainConfig(lam_twohop=1.0), TrainConfig(lam_twohop=0.0)
    used = sorted({int(i) for i in np.flatnonzero(pooling_matrix(cache.reports).sum(axis=0))})[:3]
    cells = [(r, c) for r in used for c in range(0, mcfg.width, 3)]

    def objective(tcfg, detach):
        return lambda q: sft_objective(q, cache, mcfg, tcfg, noise, detach_text=detach)
    g_det = grad(objective(on, True), pe, ["text.embed"])["text.embed"]
    fd_off = max(abs(finite_difference(objective(off, True), pe, "text.embed", ix)) for ix in cells)
    g_live = grad(objective(on, False), pe, ["text.embed"])["text.embed"]
    fd_err = max(abs(finite_difference(objective(on, False), pe, "text.embed", ix) - g_live[ix]) for ix in cells)
    detach_ok = bool(not np.any(g_det)) and fd_off == 0.0 and np.abs(g_live).max() > 0 and fd_err < 1e-6
    passed = gate_identity and top >= 1 - 1e-5 and detach_ok
    return passed, {"gate_identity_exact": gate_identity, "hop1_top_weight": top,
                    "detached_grad_max": float(np.abs(g_det).max()), "seg_off_fd_max": fd_off,
                    "live_grad_max": float(np.abs(g_live).max()), "live_fd_error": fd_err}


# ---------------------------------------------------------------- 4. cross-source swap

def check_css_laws():
    rng = make_rng(4)
    hA, hB = rng.normal(size=(8, 4, 4)), rng.normal(size=(8, 4, 4))
    involution = {}
    for p in (0.0, 0.25, 0.5, 1.0):
        once = channel_exchange(hA, hB, p)
        twice = channel_exchange(once.a, once.b, p)
        involution[p] = bool(np.array_equal(twice.a.data, hA) and np.array_equal(twice.b.data, hB))
    zero = channel_exchange(hA, hB, 0.0)
    full = channel_exchange(hA, hB, 1.0)
    identity = bool(np.array_equal(zero.a.data, hA) and np.array_equal(zero.b.data, hB))
    swap = bool(np.array_equal(full.a.data, hB) and np.array_equal(full.b.data, hA))
    return all(involution.values()) and identity and swap, {
        "involution": {str(k): v for k, v in involution.items()}, "p0_identity": identity, "p1_full_swap": swap}


# ---------------------------------------------------------------- 5. GRPO arithmetic

def check_grpo(rft_steps: int = 100):
    rng = make_rng(5)
    worst_mean, shift_exact = 0.0, True
    for _ in range(200):
        r = rng.random(4)
        worst_mean = max(worst_mean, abs(float(group_normalize(r).mean())))
        # exactness needs a shift that adds without rounding: dyadic rewards, integer offsets
        d = rng.integers(0, 64, 4) / 64.0
        c = float(rng.integers(-5, 6))
        shift_exact &= bool(np.array_equal(group_normalize(d), group_normalize(d + c)))
    hand = np.allclose(group_normalize([1, 2, 3, 4], 0.0), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)

    pol = make_policy(TINY_MODEL)
    p = pol.init_params(rng)
    feats = rng.normal(size=TINY_MODEL.feat_width)
    lp = {h: v.data for h, v in pol.log_probs(p, feats).items()}
    acts = np.stack([rng.integers(0, pol.vocab[h], 4) for h in pol.vocab], axis=-1)
    g = RolloutGroup([], acts, {h: constant(v) for h, v in lp.items()}, lp, lp, advantages=np.zeros(4))
    identity_loss = grpo_loss(g).item()
    g.advantages = group_normalize(rng.random(4))
    ratio_one_loss = grpo_loss(g).item()
    clipped = clipped_surrogate(constant(np.array([np.log(2.0)])), np.zeros(1), np.ones(1), 0.2).item()

    cache, base = tiny_setup(6, seed=5)
    mcfg, tcfg = TINY_MODEL, TrainConfig(rft_batch=2, rft_lr=0.5)
    start = freeze(base)
    ref = StageCheckpoint("SFT", start, 0, "tiny")
    frozen = FrozenModel(start, cache, mcfg)
    q = add_lora(start, mcfg, 5)
    before = {n: v.data.tobytes() for n, v in split_lora(q)[0].items()}
    r2 = make_rng(55)
    for _ in range(rft_steps):
        q, _ = rft_step(q, frozen, ref, mcfg, tcfg, r2.choice(len(cache), 2, replace=False), r2)
    base_after, lora_after = split_lora(q)
    untouched = all(base_after[n].data.tobytes() == b for n, b in before.items())
    lora_moved = any(np.any(v.data) for n, v in lora_after.items() if n.endswith(".A"))
    passed = (worst_mean <= 1e-9 and shift_exact and hand and identity_loss == 0.0 and abs(ratio_one_loss) <= 1e-9
              and abs(clipped - 1.2) <= 1e-12 and untouched and lora_moved)
    return passed, {"max_abs_advantage_mean": worst_mean, "shift_exact": shift_exact, "hand_values": bool(hand),
                    "identity_loss": identity_loss, "ratio_one_loss": ratio_one_loss, "clipped_ratio2": clipped,
                    "base_bytes_identical": untouched, "lora_updated": bool(lora_moved)}


# ---------------------------------------------------------------- 6. reward engine

def _corruptions(r: Report, rng):
    yield replace(r, defect_type=["", "   "][rng.integers(2)])
    yield replace(r, defect_location=["", "middle", "upper-left rim", "left-upper", "center center"][rng.integers(5)])
    yield replace(r, reasoning=["", "  \t"][rng.integers(2)])
    yield replace(r, confidence=[-0.1, 1.5, float("nan"), float("inf")][rng.integers(4)])


def check_rewards(n: int = 500):
    rng = make_rng(6)
    valid_ok, corrupt_zero, total = True, True, 0
    for _ in range(n):
        a = [rng.integers(len(TYPE_VOCAB)), rng.integers(N_CELLS), rng.integers(len(CONF_BINS) - 1),
             rng.integers(len(TYPE_VOCAB))]
        r = render_actions(a)
        valid_ok &= reward_format(r) == 1
        for bad in _corruptions(r, rng):
            total += 1
            corrupt_zero &= reward_format(bad) == 0
    m = (rng.random((8, 8)) > 0.5).astype(float)
    self_overlap = reward_grounding(m, m)
    contradiction = reward_consistency(Report("None", "center surface", "clear scratch visible along the edge", 0.9),
                                       RuleScorer())
    passed = bool(valid_ok and corrupt_zero) and self_overlap == 1.0 and contradiction == 0.0
    return passed, {"valid_reports": n, "corruptions": total, "all_valid_score_1": bool(valid_ok),
                    "all_corruptions_score_0": bool(corrupt_zero), "r_g_self_overlap": self_overlap,
                    "r_c_contradiction": contradiction}


# ---------------------------------------------------------------- 7. metric oracles

def brute_auroc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def lcs_oracle(a: list, b: list) -> int:
    """Longest common subsequence by exhaustive search over subsequences of the shorter list."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for idx in combinations(range(len(short)), k):
            it = iter(long_)
            if all(short[i] in it for i in idx):
                return k
    return 0


def check_metrics(n: int = 100):
    rng = make_rng(7)
    auroc_exact = True
    for _ in range(n):
        m = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, m)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 6, m) / 5.0 if rng.random() < 0.5 else rng.random(m)
        auroc_exact &= auroc(scores, labels) == brute_auroc(scores, labels)

    def set_oracle(a, b):
        A, B = set(zip(*np.nonzero(a))), set(zip(*np.nonzero(b)))
        if not A and not B:
            return 1.0, 1.0
        inter = len(A & B)
        return 2 * inter / (len(A) + len(B)), inter / len(A | B)

    overlap_ok = True
    for _ in range(n):
        s = int(rng.integers(1, 33))
        pred, gt = rng.random((s, s)), (rng.random((s, s)) < rng.random()).astype(float)
        d, i = dice_iou(pred, gt)
        od, oi = set_oracle(pred >= 0.5, gt >= 0.5)
        overlap_ok &= abs(d - od) <= 1e-12 and abs(i - oi) <= 1e-12
        overlap_ok &= abs(align_iou(pred, gt) - oi) <= 1e-12

    rouge_ok = True
    words = ["a", "b", "c", "d", "e"]
    for _ in range(n):
        c = list(rng.choice(words, int(rng.integers(0, 9))))
        r = list(rng.choice(words, int(rng.integers(0, 9))))
        L = lcs_oracle(c, r)
        want = 0.0 if not c or not r or L == 0 else 2 * (L / len(c)) * (L / len(r)) / (L / len(c) + L / len(r))
        rouge_ok &= abs(rouge_l(" ".join(c), " ".join(r)) - want) <= 1e-12
    passed = bool(auroc_exact and overlap_ok and rouge_ok)
    return passed, {"auroc_exact": bool(auroc_exact), "dice_iou_align_match": bool(overlap_ok),
                    "rouge_l_match": bool(rouge_ok), "instances": n}


# ---------------------------------------------------------------- 8. desk-scale runs

def check_desk_runs(cfg: RunConfig | None = None, budget_s: float = 900.0, echo: bool = False):
    from .pipeline import desk_run
    cfg = cfg or RunConfig()
    t0 = time.perf_counter()
    per_seed, ok = {}, True
    for seed in cfg.seeds:
        r = desk_run(cfg, seed)
        full, abl = r.rft_full, r.rft_ablated
        lift = full["schema_after"] - full["schema_before"]
        abl_lift = abl["schema_after"] - abl["schema_before"]
        checks = {
            "pt_top1>=0.9": r.pt["retrieval_top1"] >= 0.9,
            "sft_dice>=0.7": r.sft["dice"] >= 0.7,
            "sft_p_auroc>=0.9": r.sft["p_auroc"] >= 0.9,
            "schema_start<=0.7": full["schema_before"] <= 0.7,
            "schema_end>=0.95": full["schema_after"] >= 0.95,
            "r_c_lift>=0.05": full["r_c_after"] - full["r_c_before"] >= 0.05,
            "no_rf_lift<full_lift": abl_lift < lift,
        }
        per_seed[seed] = {"checks": checks, "pt_top1": r.pt["retrieval_top1"], "dice": r.sft["dice"],
                          "p_auroc": r.sft["p_auroc"], "schema": [full["schema_before"], full["schema_after"]],
                          "r_c": [full["r_c_before"], full["r_c_after"]], "schema_lift": lift,
                          "no_rf_schema_lift": abl_lift, "seconds": r.seconds["total"]}
        if echo:
            print(f"    seed {seed}: " + ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()),
                  flush=True)
        ok &= all(checks.values())
    seconds = time.perf_counter() - t0
    return bool(ok and seconds < budget_s), {"seeds": per_seed, "seconds": seconds, "budget_s": budget_s}


# ---------------------------------------------------------------- 9. degenerate inputs

def check_degenerate():
    rng = make_rng(9)
    out = {}
    empty = np.zeros((8, 8))
    out["empty_dice_iou"] = dice_iou(empty, empty) == (1.0, 1.0)
    out["empty_r_g"] = reward_grounding(empty, empty) == 1.0
    out["empty_seg_loss_finite"] = bool(np.isfinite(seg_loss(constant(np.full((8, 8), 0.3)), empty).item()))

    const = minmax_normalize(constant(np.full((4, 4), 0.7))).data
    blob = np.zeros((8, 8))
    blob[2:5, 2:5] = 1.0
    out["constant_map_zero"] = bool(np.array_equal(const, np.zeros((4, 4))))
    out["constant_align_iou_zero"] = align_iou(np.zeros((8, 8)), blob) == 0.0

    p, F, _ = _grounding_fixture(rng, K=1)
    st = slot_attention(F, 1, 2, init_slots(rng, 4, 4), seed=1)
    h1 = hop1_select(rng.normal(size=4), st)
    out["single_slot_weight_one"] = bool(np.array_equal(h1.w.data, [1.0]))
    out["single_slot_map_constant_zero"] = bool(np.array_equal(h1.m_slot.data, np.zeros((4, 4))))
    out["single_slot_decodes"] = bool(np.all(np.isfinite(hop2_decode(F, h1, p, (8, 8)).data)))

    pb = init_bca(rng, 4)
    _, _, w2, wp = bca_fuse(rng.normal(size=(6, 4)), rng.normal(size=(1, 4)), pb, return_weights=True)
    out["single_pc_token_weights_one"] = bool(np.array_equal(w2.data, np.ones((6, 1))))
    out["single_pc_token_rows_sum_one"] = bool(np.allclose(wp.data.sum(axis=-1), 1.0, atol=1e-12))

    # a dataset with no defects at all: every stage still runs, single-class metrics come back NaN
    gen = replace(TINY_GEN, defect_prob=0.0)
    cache, params = tiny_setup(4, seed=9, gen=gen)
    out["all_none_labels"] = bool(not cache.labels.any() and not cache.masks.any())
    p2, loss = sft_step(params, cache, TINY_MODEL, TrainConfig(sft_batch=4), 0)
    out["all_none_sft_finite"] = bool(np.isfinite(loss.total))
    summary = evaluate(p2, cache, TINY_MODEL).summary
    out["all_none_i_auroc_nan"] = bool(np.isnan(summary["i_auroc"]) and np.isnan(summary["p_auroc"]))
    out["all_none_schema_defined"] = 0.0 <= summary["schema_rate"] <= 1.0
    bb = backbone(p2, cache.h2d, cache.hpc, TINY_MODEL, slot_noise(cache.seeds, TINY_MODEL, "deg"))
    out["all_none_backbone_finite"] = bool(np.all(np.isfinite(bb.feats.data)))
    return all(out.values()), {k: bool(v) for k, v in out.items()}


CRITERIA = (
    (1, "gradient oracle", lambda cfg: check_gradients()),
    (2, "slot attention fidelity", lambda cfg: check_slot_attention()),
    (3, "two-hop grounding fidelity", lambda cfg: check_two_hop()),
    (4, "cross-source swap laws", lambda cfg: check_css_laws()),
    (5, "GRPO arithmetic and frozen base", lambda cfg: check_grpo()),
    (6, "reward engine", lambda cfg: check_rewards()),
    (7, "metric oracles", lambda cfg: check_metrics()),
    (8, "desk-scale behaviour", None),
    (9, "degenerate inputs", lambda cfg: check_degenerate()),
)


def run_criterion(cid: int, cfg: RunConfig | None = None, echo: bool = False) -> CriterionResult:
    cfg = cfg or RunConfig()
    _, name, fn = CRITERIA[cid - 1]
    t0 = time.perf_counter()
    try:
        passed, detail = check_desk_runs(cfg, echo=echo) if cid == 8 else fn(cfg)
    except Exception as e:  # a crash is a failed criterion, reported rather than raised
        passed, detail = False, {"error": f"{type(e).__name__}: {e}"}
    res = CriterionResult(cid, name, bool(passed), detail, time.perf_counter() - t0)
    if echo:
        print(res.line(), flush=True)
    return res


def run_all(cfg: RunConfig | None = None, only=None, echo: bool = False) -> list:
    ids = [c[0] for c in CRITERIA] if not only else sorted(set(int(i) for i in only))
    return [run_criterion(i, cfg, echo) for i in ids]
