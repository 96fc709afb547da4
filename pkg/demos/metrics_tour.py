"""Saliency metrics on small hand-made maps.

Run: python3 demos/metrics_tour.py
"""

import numpy as np

from saliency_rl import BinaryMask, evaluate_map, hungarian_max
from saliency_rl.metrics import ScoredMask, average_precision

# Ground truth: the left half of an 8x8 image.
gt = np.zeros((8, 8))
gt[:, :4] = 1

print("Map-level metrics for three predictions of the same object")
candidates = {
    "exact": gt.copy(),
    "uniform 0.5": np.full((8, 8), 0.5),
    "shifted by 1": np.roll(gt, 1, axis=1),
}
for name, pred in candidates.items():
    rec = evaluate_map(pred, gt).as_record()
    print(f"  {name:13s}", "  ".join(f"{k}={v:.4f}" for k, v in rec.items()))

# Instance matching: Hungarian assignment maximizes total IoU.
print("\nMaximum-weight matching of 3 ground truths to 2 predictions")
w = np.array([[0.9, 0.1], [0.8, 0.7], [0.0, 0.2]])
a = hungarian_max(w)
print(f"  pairs={a.pairs} total={a.total_value:.2f}")

# Average precision at IoU 0.5 with one confident false positive.
def box(r0, r1, c0, c1):
    m = np.zeros((8, 8))
    m[r0:r1, c0:c1] = 1
    return BinaryMask(m)

gts = [box(0, 4, 0, 4), box(4, 8, 4, 8)]
preds = [ScoredMask(box(0, 2, 6, 8), 0.9), ScoredMask(box(0, 4, 0, 4), 0.8), ScoredMask(box(4, 8, 4, 7), 0.6)]
print(f"\nAP@0.5 with a confident false positive: {average_precision(preds, gts, 0.5):.4f}")
