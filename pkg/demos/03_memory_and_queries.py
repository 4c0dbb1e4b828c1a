"""
Memory bank and target queries
==============================

Follow the memory bank through a long sequence: writes every third frame,
consolidation once the bank reaches its cap, and the query updates that
go with each write. Random (untrained) weights are enough to see the
bookkeeping.
"""

from collections import Counter

import numpy as np

from ssvos.params import ModelConfig, init_params
from ssvos.pipeline import EngineConfig, infer_sequence
from ssvos.synth import random_spec, synth_generate

params = init_params(ModelConfig(), seed=7, zero_heads=False)
frames, masks = synth_generate(random_spec(21, num_objects=2, frame_count=150, frame_hw=(64, 64)))

# A small cap (4 frames' worth of stride-16 elements per object) so that
# consolidation starts early.
cfg = EngineConfig(scales=(1.0,), mem_cap=4)
memlog, querylog = [], []
infer_sequence(frames, masks[0], cfg, params, memlog=memlog, query_log=querylog)

print("events:", dict(Counter(e["event"] for e in memlog)))
frame_events = [e for e in memlog if e["event"] == "frame"]
sizes = np.array([e["size"] for e in frame_events])
print("cap", frame_events[0]["cap"], "largest bank", sizes.max())
print("written frames:", [e["frame_idx"] for e in frame_events if e["wrote"]][:12], "...")

# Each write also refines every object's query around its most
# discriminative channel of the correlated map.
for rec in querylog[:4]:
    print(f"frame {rec['frame_idx']:3d} object {rec['object_id']} channel {rec['c_star']}")
