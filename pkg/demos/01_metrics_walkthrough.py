"""How one verification benchmark turns scores into fairness numbers.

Run: python demos/01_metrics_walkthrough.py

We fabricate scores for five groups where group 4 is harder (its genuine
pairs score lower), then walk through the steps an audit performs: a single
global threshold at a FAR target, per-group rates at that threshold, and the
three disparity summaries.
"""

import numpy as np

from facefair import metrics as met

rng = np.random.default_rng(0)
scores, genuine, group = [], [], []
for g in range(1, 6):
    shift = 0.6 if g == 4 else 0.9  # group 4 genuine pairs are less similar
    scores += list(rng.normal(shift, 0.25, 400)) + list(rng.normal(0.0, 0.25, 4000))
    genuine += [True] * 400 + [False] * 4000
    group += [g] * 4400
pairs = met.PairSet(scores, genuine, group)

curve = met.roc(pairs)
print(f"pooled AUC {curve.auc():.4f}, EER {met.eer(curve):.4f}")
for far in (1e-2, 1e-4):
    print(f"TPR at FAR {far:g}: {met.tpr_at_far(curve, far):.4f}")

# One threshold for everybody, fixed on the pooled impostor scores.
op = met.global_threshold(pairs, 1e-2)
print(f"\nglobal threshold at FAR 1e-2: tau = {op.tau:.4f}")
rates = met.group_rates(pairs, op.tau)
for g, r in rates.items():
    print(f"  group {g}: TPR {r.tpr:.3f}  FPR {r.fpr:.4f}")

report = met.fairness_report(pairs, 1e-2, "demo")
print(f"\nTPR gap {report.tpr_gap:.3f}   DPD {report.dpd:.3f}   EO gap {report.eo_gap:.3f}")

# The reference per-group rows give these gaps when taken at face value:
for name, row in {"ArcFace": (98.2, 95.1, 96.7, 93.8, 94.5), "CosFace": (97.8, 96.2, 97.1, 95.3, 96.0),
                  "AdaFace": (98.5, 97.8, 98.1, 97.2, 97.5)}.items():
    print(f"{name} row gap: {met.tpr_gap(row):.1f} points")
print("(the reference shared-threshold gaps are 6.3 / 3.8 / 2.5; the two tables "
      "cannot share a threshold)")
