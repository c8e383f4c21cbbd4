"""Probe: desk-scale shape-matching training, joint vs frozen geometry."""
import json
import sys
import time
from dataclasses import replace

import numpy as np

from cellmech.harness.config import load_config
from cellmech.harness.train import evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
lr_geo = float(sys.argv[2]) if len(sys.argv) > 2 else 0.1

cfg = load_config("configs/shape_3x3.yaml")
cfg = replace(cfg, steps=steps, lr_geometry=lr_geo, out="/tmp/probe_shape")
out = {"steps": steps, "lr_geometry": lr_geo}
for tag, c in (("joint", cfg),
               ("frozen", replace(cfg, frozen_geometry=True,
                                  out="/tmp/probe_shape_frozen"))):
    t0 = time.time()
    ck = train(c)
    ev = evaluate(c, ck, n_eval=50)
    loss = np.asarray(ck.loss_history)
    k = max(len(loss) // 10, 1)
    out[tag] = {
        "wall_min": round((time.time() - t0) / 60.0, 2),
        "loss_head": float(loss[:k].mean()),
        "loss_tail": float(loss[-k:].mean()),
        "nonconv": float(np.sum(ck.nonconv_history)),
        "mean_eval_loss": ev["mean_loss"],
    }
if out["frozen"]["mean_eval_loss"] > 0:
    out["improvement"] = 1.0 - out["joint"]["mean_eval_loss"] / out["frozen"]["mean_eval_loss"]
print(json.dumps(out, indent=1))
