"""
Region and boundary scores
==========================

J is the intersection over union of a predicted and a ground-truth mask.
F compares their boundaries within a small tolerance. A sequence's J&F is
the mean of the two, each averaged over frames and then objects.
"""

import numpy as np

from ssvos.metrics import (LEADERBOARD, MetricReport, boundary, boundary_f, evaluate_sequence, jaccard,
                           tolerance_radius)

gt = np.zeros((32, 32), dtype=bool)
gt[8:24, 8:24] = True

# Shifting a square by one pixel costs region overlap but barely any
# boundary score: the tolerance radius here is one pixel.
shifted = np.roll(gt, 1, axis=1)
print("radius", tolerance_radius(gt.shape))
print("J %.3f  F %.3f" % (jaccard(shifted, gt), boundary_f(shifted, gt)))
print("boundary pixels", boundary(gt).sum())

# Empty against empty counts as perfect, empty against anything as zero.
empty = np.zeros_like(gt)
print("J(empty, empty) =", jaccard(empty, empty), " F(empty, gt) =", boundary_f(empty, gt))

# Per-sequence evaluation skips the annotated first frame.
seq_gt = np.stack([gt.astype(int)] * 4)
seq_pred = seq_gt.copy()
seq_pred[3] = shifted
print(evaluate_sequence(list(seq_pred), list(seq_gt)).display())

# Leaderboard rows: J&F is the mean of J and F, rounded half up.
for team, jf, j, f in LEADERBOARD:
    print(f"{team:<10} {MetricReport.from_scores(j, f).display()['J&F']:.2f}  (listed {jf:.2f})")
