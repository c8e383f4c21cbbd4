"""Probe: mnist pipeline at acceptance budgets."""
import json
import os
import sys
import time

import numpy as np

from cellmech.harness.config import load_config
from cellmech.harness.train import evaluate, train
from cellmech.mnist import MlpSpec, distill_match_fraction, load_mnist

from dataclasses import replace

cfg = load_config("configs/mnist_4x3.yaml")
out = "/tmp/probe_mnist"
cfg = replace(cfg, out=out,
              pretrain_steps=int(sys.argv[1]) if len(sys.argv) > 1 else 400)
t0 = time.time()
ckpt = train(cfg, out_dir=out)
wall = time.time() - t0
ev = evaluate(cfg, ckpt)
data = os.path.join(out, "data")
images, labels = load_mnist(os.path.join(data, "train-images-idx3-ubyte"),
                            os.path.join(data, "train-labels-idx1-ubyte"))
spec = MlpSpec(tuple(cfg.encoder), out_scale=ckpt.out_scale)
frac = distill_match_fraction(spec, ckpt.theta, images, labels,
                              ckpt.extras["table"], ckpt.out_scale)
print(json.dumps({
    "wall_min": round(wall / 60.0, 2),
    "max_segment_sq": ev["max_segment_sq"],
    "per_digit_max": np.asarray(ev["per_digit_sq"]).max(axis=1).tolist(),
    "distill_frac": frac,
}, indent=1))
