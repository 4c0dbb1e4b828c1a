"""
Overfitting one sequence
========================

Train the toy model on a single synthetic sequence, then segment that
sequence from its first-frame mask and score it. The acceptance run uses
2000 iterations; the default here is shorter so the script finishes in a
few minutes. Pass a different count as the first argument.
"""

import logging
import sys
import time

from ssvos.metrics import evaluate_sequence, format_table
from ssvos.pipeline import EngineConfig, infer_sequence
from ssvos.synth import random_spec, synth_generate
from ssvos.training import TrainConfig, train_toy

logging.basicConfig(level=logging.INFO, format="%(message)s")
iters = int(sys.argv[1]) if len(sys.argv) > 1 else 400

frames, masks = synth_generate(random_spec(0, num_objects=3))

# Untrained heads are zero, so the first loss is exactly ln(objects + 1).
t0 = time.time()
result = train_toy([(frames, masks)], train_cfg=TrainConfig(iters=iters, log_every=100))
print(f"{iters} iterations in {time.time() - t0:.0f}s, first loss {result.losses[0]:.4f}, "
      f"last {result.losses[-1]:.4f}")

# Training sees only scale 1.0; compare single-scale inference with the
# default two-scale fusion.
rows = []
for scales in [(1.0,), (1.0, 1.5)]:
    out = infer_sequence(frames, masks[0], EngineConfig(scales=scales), result.params)
    rows.append((f"scales {scales}", evaluate_sequence([r.label_mask for r in out], masks)))
print(format_table(rows))
