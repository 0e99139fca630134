"""Score a handful of reports with the three executable rewards and turn them into advantages.

Run: python demos/03_rewards.py
"""
import numpy as np

from slotground.grounding import MaskPair
from slotground.report import Report, parse_report
from slotground.rewards import RuleScorer, clipped_surrogate, group_normalize, score_report

mask = np.zeros((8, 8))
mask[2:5, 2:6] = 1.0
pair = MaskPair(m_slot=mask, m_hat=mask * 0.9)

group = [
    Report("scratch", "upper-left edge", "thin linear groove with scratch marks along the upper-left edge", 0.9),
    Report("scratch", "upper-left edge", "local depression and dent deformation", 0.9),
    Report("None", "center surface", "clear scratch visible along the edge", 0.7),
    Report("scratch", "upper-left edge", "thin linear groove", 1.5),
]
scorer = RuleScorer()
totals = []
for r in group:
    b = score_report(r, pair, scorer)
    totals.append(b.total)
    print(f"R_F={b.r_f}  R_G={b.r_g:.3f}  R_C={b.r_c:.1f}  total={b.total:.3f}   {r.defect_type!r}: {r.reasoning[:40]!r}")

adv = group_normalize(totals)
print("\nadvantages:", np.round(adv, 4), " mean", f"{adv.mean():.1e}")

# a ratio of 2 on a positive advantage is clipped at 1 + 0.2
print("clipped surrogate at ratio 2, advantage +1:",
      clipped_surrogate(np.array([np.log(2.0)]), np.array([0.0]), np.array([1.0])).item())

print("\nparser on a document missing a field:",
      [str(v) for v in parse_report('{"DefectType": "dent", "DefectLocation": "center"}').violations])
