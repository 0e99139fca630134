"""Generate one scene, decompose its feature grid into slots and ground a report onto it.

The model is untrained, so the maps show the mechanics rather than a good mask.
Heatmaps land in ./demo_out/grounding as 16-bit PGM files.

Run: python demos/02_slots_and_grounding.py
"""
from pathlib import Path

import numpy as np

from slotground.grounding import MaskPair, export_heatmaps
from slotground.synthdata import GenConfig, gen_scene
from slotground.trainer import FrozenModel, ModelConfig, init_model, prepare

scene = gen_scene(GenConfig(defect_prob=1.0), seed=4)
print("ground-truth report:", scene.gt_report.to_json())

mcfg = ModelConfig()
cache = prepare([scene], mcfg)
p = init_model(mcfg, seed=0)
frozen = FrozenModel(p, cache, mcfg)

A = frozen.bb.state.A_map.data[0]
print(f"\n{mcfg.K} slots over a {mcfg.grid}x{mcfg.grid} grid; share of the grid claimed by each slot:")
print("  ", np.round(A.reshape(mcfg.K, -1).mean(axis=1), 3))

pair: MaskPair = frozen.masks(0, scene.gt_report)
print(f"coarse support map {pair.m_slot.shape}, decoded mask {pair.m_hat.shape}")
print(f"decoded mask range [{pair.m_hat.min():.3f}, {pair.m_hat.max():.3f}]")

out = Path("demo_out/grounding")
export_heatmaps(out, pair, A)
print(f"wrote {sorted(f.name for f in out.iterdir())} to {out}")
