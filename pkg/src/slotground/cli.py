"""Command-line harness.

    slotground gen --seed 7 --n 64 --out data/
    slotground pretrain --out runs/pt
    slotground sft --init runs/pt/pt.zsgc --out runs/sft
    slotground rft --init runs/sft/sft.zsgc --corrupt --out runs/rft
    slotground eval --ckpt runs/sft/sft.zsgc --out runs/eval
    slotground eval --assert                  # acceptance suite, exit 3 on failure
    slotground ground --ckpt runs/sft/sft.zsgc --index 3 --out runs/heat
    slotground validate-report reports.jsonl
    slotground ablate no-slots --out runs/ablate

Every command accepts ``--config run.json`` and repeated ``--set key.sub=value``
overrides. Exit status: 0 success, 2 configuration error, 3 failed acceptance check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig

EXIT_OK, EXIT_CONFIG, EXIT_ACCEPT = 0, 2, 3
log = logging.getLogger("slotground")


def _common(sp):
    sp.add_argument("--config", help="JSON run configuration")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config field, e.g. train.sft_lr=0.01 (repeatable)")
    sp.add_argument("--seed", type=int, help="seed (default: first entry of config seeds)")
    sp.add_argument("--out", help="output directory (default: <out_dir>/<command>)")
    sp.add_argument("--data", help="dataset directory written by `gen` (default: generate in memory)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slotground", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen", help="write a synthetic dataset")
    _common(sp)
    sp.add_argument("--n", type=int, default=None, help="number of scenes (default n_train + n_eval)")

    sp = sub.add_parser("pretrain", help="stage 1: 2D / point-cloud alignment")
    _common(sp)

    sp = sub.add_parser("sft", help="stage 2: supervised fine-tuning")
    _common(sp)
    sp.add_argument("--init", help="PT checkpoint to start from (default: fresh init)")

    sp = sub.add_parser("rft", help="stage 3: GRPO on LoRA factors of the report heads")
    _common(sp)
    sp.add_argument("--init", required=True, help="SFT checkpoint (frozen base and reference)")
    sp.add_argument("--corrupt", action="store_true", help="start from the corrupted-head policy")

    sp = sub.add_parser("eval", help="evaluate a checkpoint, or run the acceptance suite with --assert")
    _common(sp)
    sp.add_argument("--ckpt", help="checkpoint (default: untrained model)")
    sp.add_argument("--assert", dest="assert_", action="store_true", help="run the acceptance suite")
    sp.add_argument("--only", help="comma-separated criterion ids for --assert, e.g. 1,5,7")

    sp = sub.add_parser("ground", help="dump m_slot, m_hat and slot maps for one eval sample")
    _common(sp)
    sp.add_argument("--ckpt", help="checkpoint (default: untrained model)")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--report", help="report JSON to ground with (default: the model's own report)")

    sp = sub.add_parser("validate-report", help="validate JSONL reports, one result per line")
    sp.add_argument("path", help="JSONL file, or - for stdin")

    sp = sub.add_parser("ablate", help="train and evaluate an ablation preset")
    _common(sp)
    from .pipeline import ABLATIONS
    sp.add_argument("preset", choices=ABLATIONS)
    return ap


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set)


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def _out(args, cfg: RunConfig, name: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.out_dir) / name


def _load_params(path, cfg: RunConfig, trainable: bool = True):
    from .trainer import StageCheckpoint
    ck = StageCheckpoint.load(path)
    if ck.config_hash != cfg.hash():
        log.warning("checkpoint %s was written under config %s (current %s)", path, ck.config_hash, cfg.hash())
    return ck, ck.as_params(trainable)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    from .pipeline import write_manifest
    from .synthdata import gen_dataset
    cfg = _config(args)
    seed = _seed(args, cfg)
    n = cfg.n_train + cfg.n_eval if args.n is None else args.n
    if n < 1:
        raise ConfigError("n", "must be positive")
    out = _out(args, cfg, "data")
    frac = cfg.n_eval / (cfg.n_train + cfg.n_eval)
    m = gen_dataset(cfg.gen, seed, n, out, eval_fraction=frac)
    write_manifest(out / "run", cfg, seed, "gen", {"n": n, "dataset_hash": m["config_hash"]})
    print(f"wrote {n} scenes to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .pipeline import load_seed_data, run_pt, save_stage, write_manifest
    cfg = _config(args)
    seed, out = _seed(args, cfg), _out(args, cfg, "pretrain")
    data = load_seed_data(cfg, seed, args.data)
    res = run_pt(cfg, seed, data)
    ck = save_stage(out, "PT", cfg, res, cfg.train.pt_steps)
    write_manifest(out, cfg, seed, "pretrain", {"checkpoint": ck.name, "metrics": res.metrics})
    _print(res.metrics)
    return EXIT_OK


def cmd_sft(args) -> int:
    from .pipeline import evaluate_to, load_seed_data, run_sft, save_stage, write_manifest
    from .trainer import init_model
    cfg = _config(args)
    seed, out = _seed(args, cfg), _out(args, cfg, "sft")
    data = load_seed_data(cfg, seed, args.data)
    p = _load_params(args.init, cfg)[1] if args.init else init_model(cfg.model, seed)
    res = run_sft(cfg, seed, data, p)
    ck = save_stage(out, "SFT", cfg, res, len(res.history))
    summary = evaluate_to(out, cfg, res.params, data, seed, "sft")
    write_manifest(out, cfg, seed, "sft", {"checkpoint": ck.name, "init": args.init})
    _print({k: summary[k] for k in ("dice", "iou", "p_auroc", "i_auroc", "align_iou", "schema_rate")})
    return EXIT_OK


def cmd_rft(args, weights=None, run_name: str = "rft") -> int:
    from .pipeline import load_seed_data, rft_setup, run_rft, save_stage, write_manifest
    cfg = _config(args)
    seed, out = _seed(args, cfg), _out(args, cfg, run_name)
    data = load_seed_data(cfg, seed, args.data)
    _, p = _load_params(args.init, cfg, trainable=False)
    setup = rft_setup(cfg, p, data, corrupt=args.corrupt)
    res = run_rft(cfg, seed, data, setup, weights)
    lora = [n for n in res.params if n.startswith("lora.")]
    ck = save_stage(out, "RFT", cfg, res, cfg.train.rft_steps, lora)
    (out / "history.jsonl").write_text("".join(json.dumps(h) + "\n" for h in res.history))
    write_manifest(out, cfg, seed, run_name, {"checkpoint": ck.name, "init": args.init, "corrupt": args.corrupt,
                                              "reward_weights": list(weights or cfg.train.reward_weights),
                                              "metrics": res.metrics})
    _print(res.metrics)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.assert_:
        from .acceptance import run_all
        only = None if not args.only else [s.strip() for s in args.only.split(",")]
        results = run_all(cfg, only=only, echo=True)
        out = _out(args, cfg, "acceptance")
        out.mkdir(parents=True, exist_ok=True)
        (out / "acceptance.json").write_text(json.dumps([r.to_dict() for r in results], indent=2) + "\n")
        return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPT
    from .pipeline import evaluate_to, load_seed_data, write_manifest
    from .trainer import init_model
    seed, out = _seed(args, cfg), _out(args, cfg, "eval")
    data = load_seed_data(cfg, seed, args.data)
    p = _load_params(args.ckpt, cfg)[1] if args.ckpt else init_model(cfg.model, seed)
    summary = evaluate_to(out, cfg, p, data, seed, "eval")
    write_manifest(out, cfg, seed, "eval", {"checkpoint": args.ckpt})
    _print(summary)
    return EXIT_OK


def cmd_ground(args) -> int:
    import numpy as np
    from .grounding import MaskPair, export_heatmaps
    from .pipeline import load_seed_data, write_manifest
    from .report import parse_report
    from .trainer import FrozenModel, init_model, make_policy
    cfg = _config(args)
    seed, out = _seed(args, cfg), _out(args, cfg, "ground")
    data = load_seed_data(cfg, seed, args.data)
    if not 0 <= args.index < len(data.evalset):
        raise ConfigError("index", f"must lie in [0, {len(data.evalset)})")
    p = _load_params(args.ckpt, cfg)[1] if args.ckpt else init_model(cfg.model, seed)
    frozen = FrozenModel(p, data.evalset, cfg.model, "eval")
    if args.report:
        res = parse_report(Path(args.report).read_text())
        if res.report is None:
            raise ConfigError("report", "; ".join(str(v) for v in res.violations))
        report = res.report
    else:
        reports, _, _ = make_policy(cfg.model).decode(p, frozen.feats[args.index:args.index + 1], "argmax")
        report = reports[0]
    pair: MaskPair = frozen.masks(args.index, report)
    export_heatmaps(out, pair, frozen.bb.state.A_map.data[args.index])
    (out / "report.json").write_text(report.to_json() + "\n")
    np.save(out / "m_hat.npy", pair.m_hat)
    np.save(out / "m_slot.npy", pair.m_slot)
    write_manifest(out, cfg, seed, "ground", {"index": args.index, "checkpoint": args.ckpt})
    print(f"wrote heatmaps for eval sample {args.index} to {out}")
    return EXIT_OK


def cmd_validate_report(args) -> int:
    from .report import parse_report
    fh = sys.stdin if args.path == "-" else open(args.path)
    n_ok = n = 0
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            res = parse_report(line)
            n += 1
            n_ok += res.ok
            print(json.dumps({"line": lineno, "valid": int(res.ok),
                              "violations": [{"kind": v.kind, "field": v.field} for v in res.violations]}))
    print(json.dumps({"n": n, "valid": n_ok, "schema_rate": n_ok / n if n else None}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import (MODEL_ABLATIONS, REWARD_ABLATIONS, evaluate_to, load_seed_data, rft_setup, run_pt,
                           run_rft, run_sft, write_manifest)
    cfg = _config(args)
    if args.preset in MODEL_ABLATIONS:
        cfg = replace(cfg, model=replace(cfg.model, **MODEL_ABLATIONS[args.preset]))
    seed, out = _seed(args, cfg), _out(args, cfg, f"ablate-{args.preset}")
    data = load_seed_data(cfg, seed, args.data)
    p = run_sft(cfg, seed, data, run_pt(cfg, seed, data).params).params
    extra = {"preset": args.preset}
    if args.preset in REWARD_ABLATIONS:
        setup = rft_setup(cfg, p, data, corrupt=True)
        full = run_rft(cfg, seed, data, setup)
        abl = run_rft(cfg, seed, data, setup, REWARD_ABLATIONS[args.preset])
        extra.update(full=full.metrics, ablated=abl.metrics, weights=list(REWARD_ABLATIONS[args.preset]))
        summary = evaluate_to(out, cfg, abl.params, data, seed, args.preset)
    else:
        summary = evaluate_to(out, cfg, p, data, seed, args.preset)
    write_manifest(out, cfg, seed, f"ablate {args.preset}", extra)
    _print({"preset": args.preset, **{k: summary[k] for k in ("dice", "p_auroc", "align_iou", "schema_rate", "nli")},
            **({k: extra[k] for k in ("full", "ablated")} if "full" in extra else {})})
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "sft": cmd_sft, "rft": cmd_rft, "eval": cmd_eval,
            "ground": cmd_ground, "validate-report": cmd_validate_report, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
