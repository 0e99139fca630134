"""All three training stages on one seed: alignment, supervised fine-tuning, then GRPO repair.

The full-size run takes about three minutes on one core. Pass --tiny for a
seconds-long version on 4x4 grids (too small to meet the quality floors).

Run: python demos/04_desk_run.py [--seed 1] [--tiny]
"""
import argparse
import json

from slotground.config import RunConfig
from slotground.pipeline import desk_run

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=1)
ap.add_argument("--tiny", action="store_true")
args = ap.parse_args()

overrides = []
if args.tiny:
    overrides = ["gen.image_size=8", "gen.grid=4", "gen.defect_size=[1,4]", "gen.n_points=[64,96]",
                 "model.width=8", "model.grid=4", "model.image_size=8", "model.n_centers=8", "model.knn=4",
                 "model.K=2", "model.T=2", "model.lora_rank=2", "n_train=16", "n_eval=8",
                 "train.pt_steps=20", "train.sft_max_steps=20", "train.sft_eval_every=10", "train.rft_steps=10"]
cfg = RunConfig.load(None, overrides)
run = desk_run(cfg, args.seed)

print(f"alignment    retrieval top-1 {run.pt['retrieval_top1']:.3f}")
print(f"fine-tuning  Dice {run.sft['dice']:.3f}  P-AUROC {run.sft['p_auroc']:.3f}  Align-IoU {run.sft['align_iou']:.3f}")
for name, m in (("full reward", run.rft_full), ("without R_F", run.rft_ablated)):
    print(f"GRPO {name:12s} schema {m['schema_before']:.2f} -> {m['schema_after']:.2f}   "
          f"R_C {m['r_c_before']:.2f} -> {m['r_c_after']:.2f}")
print(json.dumps(run.seconds, indent=None, default=lambda x: round(x, 1)))
