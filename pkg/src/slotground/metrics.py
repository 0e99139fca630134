"""Evaluation metrics and the evaluation pass over a prepared scene set."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .numkit import upsample_np
from .report import Report, rouge_l, validate_report
from .rewards import reward_consistency
from .vocab import NONE_TYPE


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate P(pos > neg) + 0.5 P(tie) from rank sums."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes")
    ranks = rankdata(s)           # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _binary(a, thresh):
    return np.asarray(a, dtype=np.float64) >= thresh


def dice_iou(pred, gt, thresh: float = 0.5) -> tuple:
    """Set-count Dice and IoU after binarising ``pred``; two empty masks score (1, 1)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dice_iou shape mismatch {pred.shape} vs {gt.shape}")
    p, g = _binary(pred, thresh), np.asarray(gt) > 0.5
    inter = np.logical_and(p, g).sum()
    ps, gs = p.sum(), g.sum()
    if ps + gs == 0:
        return 1.0, 1.0
    return float(2 * inter / (ps + gs)), float(inter / np.logical_or(p, g).sum())


def align_iou(m_slot, m_hat, thresh: float = 0.5) -> float:
    """IoU between the binarised coarse support map and the final mask."""
    m_slot, m_hat = np.asarray(m_slot, dtype=np.float64), np.asarray(m_hat, dtype=np.float64)
    if m_slot.shape != m_hat.shape and m_slot.ndim == 2:
        m_slot = upsample_np(m_slot, *m_hat.shape)
    if m_slot.shape != m_hat.shape:
        raise ValueError(f"align_iou shape mismatch {m_slot.shape} vs {m_hat.shape}")
    a, b = _binary(m_slot, thresh), _binary(m_hat, thresh)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def classification_metrics(preds, labels) -> dict:
    p = np.asarray(preds).astype(bool).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if p.shape != y.shape:
        raise ValueError("preds and labels differ in length")
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    tn = int(np.sum(~p & ~y))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    acc = (tp + tn) / len(p) if len(p) else 0.0
    return {"accuracy": acc, "precision": prec, "recall": rec, "f1": f1}


def schema_rate(reports) -> float:
    reports = list(reports)
    if not reports:
        raise ValueError("schema rate of an empty batch is undefined")
    return float(np.mean([0 if r is None else validate_report(r)[0] for r in reports]))


# ---------------------------------------------------------------- evaluation pass

@dataclass
class EvalRecord:
    index: int
    score: float
    label: int
    m_slot: np.ndarray = field(repr=False)
    m_hat: np.ndarray = field(repr=False)
    gt_mask: np.ndarray | None = field(repr=False)
    pred: Report
    gt: Report

    def to_dict(self) -> dict:
        d = {"index": self.index, "score": self.score, "label": self.label,
             "pred": self.pred.to_dict(), "gt": self.gt.to_dict()}
        if self.gt_mask is not None:
            d["dice"], d["iou"] = dice_iou(self.m_hat, self.gt_mask)
        d["align_iou"] = align_iou(self.m_slot, self.m_hat)
        return d


@dataclass
class EvalResult:
    records: list
    summary: dict


def _safe_auroc(scores, labels) -> float:
    try:
        return auroc(scores, labels)
    except ValueError:
        return float("nan")


def summarize(records: list, scorer=None) -> dict:
    preds = [int(r.pred.defect_type != NONE_TYPE) for r in records]
    labels = [r.label for r in records]
    with_mask = [r for r in records if r.gt_mask is not None]
    defect = [r for r in with_mask if r.gt_mask.any()]
    di = [dice_iou(r.m_hat, r.gt_mask) for r in (defect or with_mask)]
    if with_mask:
        pix_s = np.concatenate([r.m_hat.ravel() for r in with_mask])
        pix_y = np.concatenate([r.gt_mask.ravel() for r in with_mask])
        p_auroc = _safe_auroc(pix_s, pix_y)
    else:
        p_auroc = float("nan")
    out = {
        "n": len(records),
        "dice": float(np.mean([d for d, _ in di])) if di else float("nan"),
        "iou": float(np.mean([i for _, i in di])) if di else float("nan"),
        "p_auroc": p_auroc,
        "i_auroc": _safe_auroc([r.score for r in records], labels),
        "align_iou": float(np.mean([align_iou(r.m_slot, r.m_hat) for r in records])),
        "schema_rate": schema_rate([r.pred for r in records]),
        "nli": float(np.mean([reward_consistency(r.pred, scorer) for r in records])),
        "rouge_l": float(np.mean([rouge_l(r.pred.text(), r.gt.text()) for r in records])),
    }
    out.update(classification_metrics(preds, labels))
    return out


def evaluate(p: dict, cache, mcfg, samples: int = 0, scorer=None, seed: int = 0, tag="eval") -> EvalResult:
    """Argmax-decode a report per scene, ground it with its own text and score everything."""
    from .trainer import FrozenModel, make_policy
    frozen = FrozenModel(p, cache, mcfg, tag)
    reports, _, _ = make_policy(mcfg).decode(p, frozen.feats, "argmax")
    records = []
    for i, r in enumerate(reports):
        mp = frozen.masks(i, r)
        gt = cache.masks[i] if cache.has_mask[i] else None
        records.append(EvalRecord(i, float(mp.m_hat.max()), int(cache.labels[i]), mp.m_slot, mp.m_hat,
                                  gt, r, cache.reports[i]))
    summary = summarize(records, scorer)
    if samples:
        from .trainer import sampled_report_stats
        s = sampled_report_stats(p, frozen, mcfg, samples, seed, scorer)
        summary["sampled_schema_rate"], summary["sampled_nli"] = s["schema_rate"], s["r_c"]
    return EvalResult(records, summary)


# ---------------------------------------------------------------- writers

def write_metrics(out_dir, summary: dict, records: list | None = None, run: str = "run") -> None:
    """metrics.json, metrics.csv (one row) and optionally records.jsonl."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    row = {"run": run, **{k: v for k, v in summary.items() if np.isscalar(v)}}
    (d / "metrics.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
    with open(d / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    if records is not None:
        with open(d / "records.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
