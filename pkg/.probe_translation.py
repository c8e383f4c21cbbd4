"""Probe: desk-scale translation training sensitivity to lr_geometry."""
import json
import sys
import time

import numpy as np

from cellmech.harness.config import ExperimentConfig
from cellmech.harness.train import evaluate, train

lr_geo = float(sys.argv[1])
steps = int(sys.argv[2])
batch = int(sys.argv[3]) if len(sys.argv) > 3 else 2

lr = float(sys.argv[4]) if len(sys.argv) > 4 else 1e-4 * batch

cfg = ExperimentConfig(
    kind="translation", rows=3, cols=3, preset="squeeze_lr",
    encoder=(2, 30, 30, 10, 2), lr=lr, lr_geometry=lr_geo,
    steps=steps, batch=batch, seed=11, out="/tmp/probe_tr_%g" % lr_geo,
    initial_increments=1,
)
t0 = time.time()
ck = train(cfg)
wall = time.time() - t0
loss = np.asarray(ck.loss_history)
k = max(len(loss) // 10, 1)
rep = {
    "lr_geometry": lr_geo,
    "steps": steps,
    "batch": batch,
    "wall_min": round(wall / 60.0, 2),
    "loss_head": float(loss[:k].mean()),
    "loss_tail": float(loss[-k:].mean()),
    "nonconv": float(np.sum(ck.nonconv_history)),
    "radii_drift": float(np.abs(ck.params.radii - 0.5).max()),
    "corner_drift": float(np.abs(ck.params.corners).max()),
}
ev = evaluate(cfg, ck, n_eval=20)
rep["rms"] = ev["rms_error"]
rep["box_side"] = ev["box_side"]
rep["rms_frac"] = ev["rms_error"] / ev["box_side"]
rep["vert_rms"] = ev["vertical_rms"]
rep["mean_vert_offset"] = ev["mean_vertical_offset"]
print(json.dumps(rep, indent=1))
