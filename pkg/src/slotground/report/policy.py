"""Categorical report decoder standing in for the language model.

Four heads read the pooled multimodal feature (plus a constant 1 so that every head
carries its own bias column): defect type, location cell, confidence bin and the
reasoning template. The reasoning head shares the type vocabulary but is sampled
independently, so type/reasoning agreement is something the policy has to learn.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numkit import Tensor, astensor, concat, constant, linear, log_softmax, matmul, param
from ..vocab import CONF_BINS, N_CELLS, TYPE_VOCAB
from .schema import LocationSpec, Report
from .text import render_reasoning

HEADS = ("type", "location", "confidence", "reasoning")


def lora_apply(base, A, B, scale: float) -> Tensor:
    """base + scale * A @ B. ``base`` is left untouched."""
    base, A, B = astensor(base), astensor(A), astensor(B)
    if A.shape[0] != base.shape[0] or B.shape[1] != base.shape[1] or A.shape[1] != B.shape[0]:
        raise ValueError(f"LoRA factors {A.shape} @ {B.shape} do not fit base {base.shape}")
    if scale == 0.0:
        return base
    return base + scale * matmul(A, B)


@dataclass
class ReportPolicy:
    feat_width: int
    lora_rank: int = 8
    lora_scale: float = 1.0
    vocab: dict = field(default_factory=lambda: {
        "type": len(TYPE_VOCAB), "location": N_CELLS,
        "confidence": len(CONF_BINS), "reasoning": len(TYPE_VOCAB)})

    def init_params(self, rng) -> dict:
        s = 0.1 / np.sqrt(self.feat_width)
        return {f"policy.{h}.W": param(rng.normal(0.0, s, (v, self.feat_width + 1)))
                for h, v in self.vocab.items()}

    def init_lora(self, rng) -> dict:
        out = {}
        for h, v in self.vocab.items():
            out[f"lora.{h}.A"] = param(np.zeros((v, self.lora_rank)))
            out[f"lora.{h}.B"] = param(rng.normal(0.0, 1.0 / np.sqrt(self.feat_width + 1),
                                                  (self.lora_rank, self.feat_width + 1)))
        return out

    def _augment(self, feats) -> Tensor:
        feats = astensor(feats)
        if feats.shape[-1] != self.feat_width:
            raise ValueError(f"policy expects feature width {self.feat_width}, got {feats.shape[-1]}")
        ones = constant(np.ones(feats.shape[:-1] + (1,)))
        return concat([feats, ones], axis=-1)

    def weight(self, p: dict, head: str) -> Tensor:
        W = p[f"policy.{head}.W"]
        if f"lora.{head}.A" in p:
            W = lora_apply(W, p[f"lora.{head}.A"], p[f"lora.{head}.B"], self.lora_scale)
        return W

    def log_probs(self, p: dict, feats) -> dict:
        """Per-head log-softmax tensors, each (..., V_head)."""
        x = self._augment(feats)
        return {h: log_softmax(linear(x, self.weight(p, h)), axis=-1) for h in self.vocab}

    def decode(self, p: dict, feats, mode: str = "argmax", rng=None):
        """Return (reports, actions (B,4), per-head log-probs dict of (B,) arrays)."""
        lp = self.log_probs(p, feats)
        squeeze = lp["type"].ndim == 1
        actions = []
        for h in HEADS:
            logits = np.atleast_2d(lp[h].data)
            if mode == "argmax":
                a = logits.argmax(axis=-1)
            elif mode == "sample":
                if rng is None:
                    raise ValueError("sample mode needs an rng")
                probs = np.exp(logits)
                cum = np.cumsum(probs, axis=-1)
                u = rng.random(len(logits))[:, None] * cum[:, -1:]
                a = np.minimum((cum < u).sum(axis=-1), logits.shape[-1] - 1)
            else:
                raise ValueError(f"unknown decode mode {mode!r}")
            actions.append(a)
        actions = np.stack(actions, axis=-1)
        head_lp = {h: np.atleast_2d(lp[h].data)[np.arange(len(actions)), actions[:, i]]
                   for i, h in enumerate(HEADS)}
        reports = [render_actions(a) for a in actions]
        if squeeze:
            return reports[0], actions[0], {h: float(v[0]) for h, v in head_lp.items()}
        return reports, actions, head_lp


def render_actions(a) -> Report:
    t, cell, c, r = (int(x) for x in a)
    loc = str(LocationSpec.from_cell(cell))
    return Report(TYPE_VOCAB[t], loc, render_reasoning(TYPE_VOCAB[r], loc), float(CONF_BINS[c]))


def actions_from_report(r: Report) -> np.ndarray:
    """Inverse of :func:`render_actions` for reports the policy can emit."""
    loc = r.location
    if loc is None:
        raise ValueError(f"location {r.defect_location!r} does not parse")
    tmpl = None
    for t in TYPE_VOCAB:
        if render_reasoning(t, r.defect_location) == r.reasoning or render_reasoning(t, str(loc)) == r.reasoning:
            tmpl = TYPE_VOCAB.index(t)
            break
    if tmpl is None:
        raise ValueError("reasoning does not match any template")
    conf = int(np.argmin([abs(b - r.confidence) for b in CONF_BINS]))
    return np.array([TYPE_VOCAB.index(r.defect_type), loc.cell, conf, tmpl])


def gather_log_prob(lp: dict, actions) -> Tensor:
    """Joint log-probability (sum over heads) of ``actions`` (B,4) under ``lp``."""
    actions = np.atleast_2d(actions)
    rows = np.arange(len(actions))
    total = None
    for i, h in enumerate(HEADS):
        term = lp[h][rows, actions[:, i]] if lp[h].ndim == 2 else lp[h][actions[0, i]]
        total = term if total is None else total + term
    return total


def decode_report(policy: ReportPolicy, p: dict, feats, mode: str = "argmax", seed=None):
    """Single-query convenience wrapper: (Report, per-head log-probs)."""
    from ..numkit import make_rng
    rng = make_rng(seed) if seed is not None else None
    r, _, lp = policy.decode(p, np.asarray(astensor(feats).data).reshape(-1), mode, rng)
    return r, lp
