"""Executable rewards, group-relative advantages and the clipped GRPO objective.

Three checkers score a generated report: schema validity (R_F), overlap between
the coarse support map and the decoded mask (R_G), and whether the reasoning
text supports the stated defect type (R_C). Rewards within a group of sampled
reports are normalised to advantages, which drive a clipped ratio objective with
an exact categorical KL anchor to a frozen reference policy.
"""
from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol

import numpy as np

from .grounding import DICE_SMOOTH, MaskPair
from .numkit import (Tensor, astensor, clip, constant, exp, make_rng, minimum, param, register_composite,
                     tsum, upsample_np)
from .report import HEADS, Report, ReportPolicy, gather_log_prob, lora_apply, tokenize, validate_report

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)
EPS_ADV = 1e-8
EPS_CLIP = 0.2
KL_BETA = 0.1
GROUP_SIZE = 4
RULES_RESOURCE = "consistency_rules_v1.json"


# ---------------------------------------------------------------- individual rewards

def reward_format(r: Report | None) -> int:
    """1 when every field is present and valid, else 0."""
    if r is None:
        return 0
    return validate_report(r)[0]


def reward_grounding(m_slot, m_hat, s: float = DICE_SMOOTH) -> float:
    """Soft Dice between the (upsampled) coarse support map and the decoded mask."""
    m_slot = np.asarray(astensor(m_slot).data)
    m_hat = np.asarray(astensor(m_hat).data)
    if m_slot.shape != m_hat.shape and m_slot.ndim == 2 and m_hat.ndim == 2:
        m_slot = upsample_np(m_slot, *m_hat.shape)
    if m_slot.shape != m_hat.shape:
        raise ValueError(f"reward_grounding shape mismatch {m_slot.shape} vs {m_hat.shape}")
    return float((2.0 * np.sum(m_slot * m_hat) + s) / (np.sum(m_slot) + np.sum(m_hat) + s))


class EntailmentScorer(Protocol):
    def score(self, reasoning: str, defect_type: str) -> float: ...


class ScorerUnavailable(RuntimeError):
    """The entailment service could not be reached and no fallback is configured."""


def load_rules(path=None) -> dict:
    if path is None:
        text = resources.files("slotground.resources").joinpath(RULES_RESOURCE).read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    rules = json.loads(text)
    if rules.get("version") != 1:
        raise ValueError(f"unsupported rule-table version {rules.get('version')!r}")
    return rules


class RuleScorer:
    """Keyword-table scorer: which defect types does the reasoning mention?"""

    def __init__(self, rules: dict | None = None):
        rules = load_rules() if rules is None else rules
        self.none_type = rules["none_type"]
        self.keywords = {t: frozenset(w) for t, w in rules["keywords"].items()}
        self.scores = rules["scores"]
        self.version = rules["version"]

    def hits(self, reasoning: str) -> set:
        toks = set(tokenize(reasoning))
        return {t for t, kw in self.keywords.items() if toks & kw}

    def score(self, reasoning: str, defect_type: str) -> float:
        hit = self.hits(reasoning)
        if defect_type == self.none_type:
            return self.scores["none_with_cue"] if hit else self.scores["none_clean"]
        if defect_type not in hit:
            return self.scores["no_match"]
        return self.scores["single_match"] if len(hit) == 1 else self.scores["multiple_match"]


class HttpEntailmentScorer:
    """Client for ``POST {base_url}/entail`` with body ``{premise, hypothesis}``.

    The response must be ``{"entail": p}`` with p in [0, 1]. After ``retries``
    failed attempts the scorer either falls back to ``fallback`` or raises
    :class:`ScorerUnavailable` (``fallback=None``).
    """

    def __init__(self, base_url: str, timeout: float = 2.0, retries: int = 2,
                 fallback: EntailmentScorer | None = None, backoff: float = 0.1):
        self.url = base_url.rstrip("/") + "/entail"
        self.timeout = timeout
        self.retries = retries
        self.fallback = fallback
        self.backoff = backoff
        self.fallback_count = 0

    @staticmethod
    def hypothesis(defect_type: str) -> str:
        return f"the defect is a {defect_type}"

    def _post(self, body: bytes) -> float:
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"},
                                     method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        p = float(payload["entail"])
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"entailment probability {p} outside [0, 1]")
        return p

    def score(self, reasoning: str, defect_type: str) -> float:
        body = json.dumps({"premise": reasoning, "hypothesis": self.hypothesis(defect_type)}).encode("utf-8")
        err = None
        for attempt in range(self.retries + 1):
            try:
                return self._post(body)
            except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError) as e:
                err = e
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        if self.fallback is None:
            raise ScorerUnavailable(f"entailment service at {self.url} failed: {err}") from err
        self.fallback_count += 1
        log.warning("entailment service failed (%s); using fallback scorer", err)
        return self.fallback.score(reasoning, defect_type)


def reward_consistency(r: Report | None, scorer: EntailmentScorer | None = None) -> float:
    """Does the reasoning support the stated defect type? 0 for unparseable output."""
    if r is None or not r.reasoning.strip() or not r.defect_type.strip():
        return 0.0
    scorer = RuleScorer() if scorer is None else scorer
    return float(scorer.score(r.reasoning, r.defect_type))


# ---------------------------------------------------------------- composition

def _check_weights(weights) -> tuple:
    w = tuple(float(x) for x in weights)
    if len(w) != 3:
        raise ValueError(f"need three reward weights, got {len(w)}")
    if any(x < 0 for x in w):
        raise ValueError(f"reward weights must be non-negative, got {w}")
    return w


@dataclass
class RewardBreakdown:
    r_f: int
    r_g: float
    r_c: float
    weights: tuple = DEFAULT_WEIGHTS
    total: float = field(init=False)

    def __post_init__(self):
        self.weights = _check_weights(self.weights)
        self.total = total_reward(self)

    def to_dict(self) -> dict:
        return {"r_f": self.r_f, "r_g": self.r_g, "r_c": self.r_c, "weights": list(self.weights),
                "total": self.total}


def total_reward(b: RewardBreakdown) -> float:
    wf, wg, wc = _check_weights(b.weights)
    return wf * b.r_f + wg * b.r_g + wc * b.r_c


def score_report(r: Report | None, masks: MaskPair, scorer=None, weights=DEFAULT_WEIGHTS,
                 gt_mask: np.ndarray | None = None) -> RewardBreakdown:
    """All three rewards for one rollout. ``gt_mask`` replaces m_slot as the R_G reference."""
    ref = masks.m_slot if gt_mask is None else gt_mask
    return RewardBreakdown(reward_format(r), reward_grounding(ref, masks.m_hat),
                           reward_consistency(r, scorer), weights)


def group_normalize(rewards, eps_adv: float = EPS_ADV) -> np.ndarray:
    """(r - mean) / (population std + eps_adv)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError(f"group_normalize needs at least two rewards, got shape {r.shape}")
    return (r - r.mean()) / (r.std() + eps_adv)


# ---------------------------------------------------------------- policy objective

@dataclass
class LoraDelta:
    A: Tensor      # (out, r)
    B: Tensor      # (r, in)
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def apply(self, base) -> Tensor:
        return lora_apply(base, self.A, self.B, self.scale)


@dataclass
class RolloutGroup:
    """G sampled reports for one query.

    ``head_lp`` holds per-head log-softmax tensors under the current policy (shape
    (V,) or (G, V)); the ``_old`` and ``_ref`` dicts hold plain arrays.
    """
    reports: list
    actions: np.ndarray                 # (G, n_heads)
    head_lp: dict
    head_lp_old: dict
    head_lp_ref: dict
    rewards: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    advantages: np.ndarray | None = None

    @property
    def G(self) -> int:
        return len(self.actions)

    def normalize(self, eps_adv: float = EPS_ADV) -> np.ndarray:
        self.advantages = group_normalize([b.total for b in self.rewards], eps_adv)
        return self.advantages


def _rows(lp, G: int):
    lp = astensor(lp)
    if lp.ndim == 1:
        return lp.reshape((1, lp.shape[0])) + constant(np.zeros((G, 1)))
    return lp


def joint_log_prob(head_lp: dict, actions) -> Tensor:
    actions = np.atleast_2d(actions)
    return gather_log_prob({h: _rows(head_lp[h], len(actions)) for h in HEADS}, actions)


def clipped_surrogate(logp_new, logp_old, advantages, eps_clip: float = EPS_CLIP) -> Tensor:
    """mean_i min(rho_i A_i, clip(rho_i, 1 - eps, 1 + eps) A_i) with rho = exp(new - old)."""
    logp_new = astensor(logp_new)
    diff = logp_new.data - np.asarray(logp_old, dtype=np.float64)
    if not np.all(np.isfinite(diff)) or np.any(diff > 700.0):
        raise FloatingPointError("policy ratio is not finite")
    adv = constant(np.asarray(advantages, dtype=np.float64))
    rho = exp(logp_new - constant(np.asarray(logp_old, dtype=np.float64)))
    return minimum(rho * adv, clip(rho, 1.0 - eps_clip, 1.0 + eps_clip) * adv).mean()


def categorical_kl(lp, lp_ref) -> Tensor:
    """Exact KL(p || q) over the last axis, from log-probabilities; mean over leading axes."""
    lp = astensor(lp)
    q = np.asarray(astensor(lp_ref).data)
    kl = tsum(exp(lp) * (lp - constant(q)), axis=-1)
    return kl.mean()


def policy_kl(head_lp: dict, head_lp_ref: dict) -> Tensor:
    """KL averaged over heads (and rollouts, when the log-probs carry a group axis)."""
    total = None
    for h in HEADS:
        k = categorical_kl(head_lp[h], head_lp_ref[h])
        total = k if total is None else total + k
    return total * (1.0 / len(HEADS))


def grpo_loss(group: RolloutGroup, eps_clip: float = EPS_CLIP, beta: float = KL_BETA) -> Tensor:
    if group.advantages is None:
        raise ValueError("rollout group has no advantages; call normalize() first")
    new = joint_log_prob(group.head_lp, group.actions)
    old = joint_log_prob(group.head_lp_old, group.actions).data
    surrogate = clipped_surrogate(new, old, group.advantages, eps_clip)
    return -surrogate + beta * policy_kl(group.head_lp, group.head_lp_ref)


# ---------------------------------------------------------------- gradient-check composite

@register_composite("grpo_surrogate")
def _gc_grpo():
    rng = make_rng(41)
    pol = ReportPolicy(feat_width=3, lora_rank=2)
    base = {k: constant(v.data) for k, v in pol.init_params(rng).items()}
    lora = {k: param(rng.normal(0, 0.3, v.shape)) for k, v in pol.init_lora(rng).items()}
    feats = rng.normal(size=3)
    ref_lp = {h: v.data for h, v in pol.log_probs(base, feats).items()}
    old_lp = {h: v.data + 0.0 for h, v in pol.log_probs({**base, **lora}, feats).items()}
    actions = np.stack([rng.integers(0, pol.vocab[h], GROUP_SIZE) for h in HEADS], axis=-1)
    adv = group_normalize(rng.random(GROUP_SIZE))
    # shift the old log-probs so some ratios land outside the clip band
    shift = np.array([0.0, 0.4, -0.4, 0.05])

    def f(q):
        lp = pol.log_probs(q, feats)
        group = RolloutGroup([], actions, lp, old_lp, ref_lp, advantages=adv)
        new = joint_log_prob(group.head_lp, actions)
        old = joint_log_prob(old_lp, actions).data + shift
        return -clipped_surrogate(new, old, adv) + KL_BETA * policy_kl(lp, ref_lp)
    return f, {**base, **lora}, sorted(lora)
