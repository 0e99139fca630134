"""Stage orchestration for one seed: data, PT, SFT, corrupted-head RFT and evaluation.

Used by the command line and by the acceptance checks. Each stage function takes
and returns plain parameter dicts so stages can be resumed from checkpoints.
"""
from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .metrics import evaluate, write_metrics
from .synthdata import load_dataset, make_scenes
from .trainer import (FrozenModel, SceneCache, StageCheckpoint, StageResult, add_lora, corrupt_policy, freeze,
                      init_model, prepare, pretrain, rft, sft, split_lora)

log = logging.getLogger(__name__)

# reward weights for the R_F / R_G / R_C ablations: drop one, split the rest evenly
REWARD_ABLATIONS = {"rft-no-rf": (0.0, 0.5, 0.5), "rft-no-rg": (0.5, 0.0, 0.5), "rft-no-rc": (0.5, 0.5, 0.0)}
MODEL_ABLATIONS = {"no-slots": {"use_slots": False}, "one-hop": {"two_hop": False}, "no-bca": {"use_bca": False}}
ABLATIONS = tuple(MODEL_ABLATIONS) + tuple(REWARD_ABLATIONS)


@dataclass
class SeedData:
    train: SceneCache
    evalset: SceneCache


def load_seed_data(cfg: RunConfig, seed: int, data_dir=None) -> SeedData:
    """Train/eval caches from a dataset directory, or generated in memory (disjoint scene seeds)."""
    if data_dir is not None:
        tr = load_dataset(data_dir, "train", cfg.gen.grid)
        ev = load_dataset(data_dir, "eval", cfg.gen.grid)
        if not tr or not ev:
            raise ValueError(f"dataset {data_dir} needs both train and eval samples")
    else:
        tr = make_scenes(cfg.gen, seed, cfg.n_train)
        ev = make_scenes(cfg.gen, seed, cfg.n_eval, offset=cfg.n_train)
    return SeedData(prepare(tr, cfg.model), prepare(ev, cfg.model))


def train_config(cfg: RunConfig, seed: int, **changes):
    return replace(cfg.train, seed=seed, **changes)


def run_pt(cfg: RunConfig, seed: int, data: SeedData, p: dict | None = None) -> StageResult:
    p = init_model(cfg.model, seed) if p is None else p
    return pretrain(p, data.train, train_config(cfg, seed))


def run_sft(cfg: RunConfig, seed: int, data: SeedData, p: dict, stop_on_target: bool = False) -> StageResult:
    return sft(p, data.train, data.evalset, cfg.model, train_config(cfg, seed), stop_on_target)


@dataclass
class RFTSetup:
    start: dict               # corrupted (or plain) SFT params, frozen
    ref: StageCheckpoint
    frozen_train: FrozenModel
    frozen_eval: FrozenModel


def rft_setup(cfg: RunConfig, p_sft: dict, data: SeedData, corrupt: bool = True) -> RFTSetup:
    """Frozen reference and cached backbones for RFT; the reference is the starting policy."""
    base, _ = split_lora(p_sft)
    start = freeze(corrupt_policy(base) if corrupt else base)
    ref = StageCheckpoint("SFT", start, 0, cfg.hash())
    return RFTSetup(start, ref, FrozenModel(start, data.train, cfg.model), FrozenModel(start, data.evalset, cfg.model))


def run_rft(cfg: RunConfig, seed: int, data: SeedData, setup: RFTSetup, weights=None, scorer=None) -> StageResult:
    tcfg = train_config(cfg, seed) if weights is None else train_config(cfg, seed, reward_weights=tuple(weights))
    scorer = cfg.scorer.build() if scorer is None else scorer
    return rft(add_lora(setup.start, cfg.model, seed), setup.ref, data.train, data.evalset, cfg.model, tcfg,
               scorer, setup.frozen_train, setup.frozen_eval)


@dataclass
class DeskRun:
    seed: int
    pt: dict
    sft: dict
    rft_full: dict
    rft_ablated: dict
    seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "pt": self.pt, "sft": self.sft, "rft_full": self.rft_full,
                "rft_ablated": self.rft_ablated, "seconds": self.seconds}


def desk_run(cfg: RunConfig, seed: int, ablate: str = "rft-no-rf") -> DeskRun:
    """PT, SFT, then RFT from the corrupted head with the full reward and with one reward ablated."""
    t0 = time.perf_counter()
    sec = {}
    data = load_seed_data(cfg, seed)
    sec["data"] = time.perf_counter() - t0
    t = time.perf_counter()
    pt = run_pt(cfg, seed, data)
    sec["pt"] = time.perf_counter() - t
    t = time.perf_counter()
    st = run_sft(cfg, seed, data, pt.params)
    sec["sft"] = time.perf_counter() - t
    t = time.perf_counter()
    setup = rft_setup(cfg, st.params, data)
    full = run_rft(cfg, seed, data, setup)
    ablated = run_rft(cfg, seed, data, setup, REWARD_ABLATIONS[ablate])
    sec["rft"] = time.perf_counter() - t
    sec["total"] = time.perf_counter() - t0
    sft_keys = ("dice", "iou", "p_auroc", "i_auroc", "align_iou", "schema_rate", "accuracy", "step")
    return DeskRun(seed, pt.metrics, {k: st.metrics[k] for k in sft_keys if k in st.metrics},
                   full.metrics, ablated.metrics, sec)


# ---------------------------------------------------------------- artifacts

def write_manifest(out_dir, cfg: RunConfig, seed: int, command: str, extra: dict | None = None) -> dict:
    """manifest.json next to every run's artifacts: command, seed and config hash."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    m = {"command": command, "seed": seed, "config_hash": cfg.hash(), "config": cfg.to_dict(),
         "python": platform.python_version(), "numpy": np.__version__}
    if extra:
        m.update(extra)
    (d / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return m


def save_stage(out_dir, stage: str, cfg: RunConfig, res: StageResult, step: int, lora_names=()) -> Path:
    path = Path(out_dir) / f"{stage.lower()}.zsgc"
    StageCheckpoint(stage, res.params, step, cfg.hash(), lora_names=tuple(lora_names)).save(path)
    return path


def evaluate_to(out_dir, cfg: RunConfig, p: dict, data: SeedData, seed: int, run: str) -> dict:
    res = evaluate(p, data.evalset, cfg.model, samples=cfg.train.eval_samples, scorer=cfg.scorer.build(),
                   seed=seed, tag="eval")
    write_metrics(out_dir, res.summary, res.records, run)
    return res.summary
