"""Probe: desk-scale rotation training on the 5x5 single-channel grid."""
import json
import sys
import time
from dataclasses import replace

import numpy as np

from cellmech.harness.config import load_config
from cellmech.harness.train import evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
lr_geo = float(sys.argv[2]) if len(sys.argv) > 2 else 0.1
batch = int(sys.argv[3]) if len(sys.argv) > 3 else 2

cfg = load_config("configs/rotation_5x5.yaml")
cfg = replace(cfg, steps=steps, lr_geometry=lr_geo, batch=batch,
              lr=1e-3 * batch, out="/tmp/probe_rot")
t0 = time.time()
ck = train(cfg)
wall = time.time() - t0
loss = np.asarray(ck.loss_history)
k = max(len(loss) // 10, 1)
ev = evaluate(cfg, ck, n_eval=25)
print(json.dumps({
    "steps": steps, "lr_geometry": lr_geo, "batch": batch,
    "wall_min": round(wall / 60.0, 2),
    "loss_head": float(loss[:k].mean()),
    "loss_tail": float(loss[-k:].mean()),
    "nonconv": float(np.sum(ck.nonconv_history)),
    "radii_drift": float(np.abs(ck.params.radii - 0.5).max()),
    "endpoint_rms_frac": ev["endpoint_rms_frac"],
    "achieved_max": float(np.max(ev["achieved"])),
    "commanded_max": float(np.max(ev["commanded"])),
}, indent=1))
