"""Experiment configuration: a YAML key-value tree fully determining a run.

A config names the task, the cell layout and material, the solver and
encoder settings, the optimizer schedule and the seed.  ``config_digest``
hashes the canonical resolved form so checkpoints can refuse to load
against a different experiment.
"""

import hashlib
import json
from dataclasses import dataclass, fields

import numpy as np
import yaml

from ..geometry import make_layout
from ..mechanics import Material
from ..neural import MlpSpec
from ..solver import SolveSettings
from ..tasks import make_shape_family

TASK_KINDS = ("translation", "rotation", "shape", "mnist")

# encoder input width per task; shape feeds the flattened target outline
# and mnist feeds the flattened image
_INPUT_DIMS = {"translation": 2, "rotation": 1}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a training run."""

    kind: str
    rows: int
    cols: int
    preset: str
    encoder: tuple  # full activation sizes, input through output
    cell_width: float = 1.0
    initial_radius: float = 0.5
    youngs: float = 1.0
    poisson: float = 0.3
    newton_tol: float = 1e-8
    initial_increments: int = 2
    lr: float = 1e-4
    lr_geometry: float = None
    steps: int = 100
    batch: int = 1
    workers: int = 1
    frozen_geometry: bool = False
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    seed: int = 0
    out: str = "runs/exp"
    # task parameters
    box_scale: float = 1.2
    angle_lo: float = 0.0
    angle_hi: float = float(np.pi / 8)
    shape_seed: int = 0
    shape_points: int = 49
    shape_lengthscale: float = 0.8
    shape_variance: float = 0.04
    # digit-display stages
    mnist_dir: str = ""
    n_per_class: int = 60
    pretrain_steps: int = 400
    pretrain_lr: float = 0.1
    distill_steps: int = 3000
    distill_lr: float = 0.05
    distill_batch: int = 32
    finetune_steps: int = 50
    finetune_lr: float = 1e-4
    finetune_batch: int = 4

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(int(n) for n in self.encoder))
        if self.kind not in TASK_KINDS:
            raise ValueError("unknown task kind %r" % (self.kind,))
        if self.batch < 1 or self.workers < 1 or self.steps < 0:
            raise ValueError("batch and workers must be >= 1, steps >= 0")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        m = self.descriptor_size
        if self.encoder[0] != m:
            raise ValueError(
                "encoder input %d does not match task descriptor size %d"
                % (self.encoder[0], m))
        k = layout_of(self).num_channels
        if self.encoder[-1] != k:
            raise ValueError(
                "encoder output %d does not match %d actuation channels"
                % (self.encoder[-1], k))

    @property
    def descriptor_size(self):
        if self.kind == "shape":
            return 2 * self.shape_points
        if self.kind == "mnist":
            return 784
        return _INPUT_DIMS[self.kind]


def layout_of(cfg):
    return make_layout(cfg.rows, cfg.cols, cfg.cell_width, cfg.preset)


def material_of(cfg):
    return Material(cfg.youngs, cfg.poisson)


def solve_settings_of(cfg):
    return SolveSettings(newton_tol=cfg.newton_tol,
                         initial_increments=cfg.initial_increments)


def encoder_of(cfg):
    # actuations saturate at 60% of cell width through the output tanh
    return MlpSpec(cfg.encoder, out_scale=0.6 * cfg.cell_width)


def family_of(cfg):
    return make_shape_family(cfg.shape_seed,
                             lengthscale=cfg.shape_lengthscale,
                             variance=cfg.shape_variance,
                             n_points=cfg.shape_points)


# YAML files group the flat fields into a small tree for readability
_GROUPS = {
    "task": ("kind", "box_scale", "angle_lo", "angle_hi", "shape_seed",
             "shape_points", "shape_lengthscale", "shape_variance",
             "mnist_dir", "n_per_class"),
    "layout": ("rows", "cols", "cell_width", "preset", "initial_radius"),
    "material": ("youngs", "poisson"),
    "solver": ("newton_tol", "initial_increments"),
    "optimizer": ("lr", "lr_geometry", "steps", "batch", "workers",
                  "frozen_geometry", "checkpoint_every", "pretrain_steps",
                  "pretrain_lr", "distill_steps", "distill_lr",
                  "distill_batch", "finetune_steps", "finetune_lr",
                  "finetune_batch"),
}
_TOP_LEVEL = ("encoder", "seed", "out")


def config_to_dict(cfg):
    """Nested plain-python dict with every field resolved."""
    out = {}
    for group, names in _GROUPS.items():
        out[group] = {n: getattr(cfg, n) for n in names}
    for n in _TOP_LEVEL:
        out[n] = getattr(cfg, n)
    out["encoder"] = list(cfg.encoder)
    return out


def config_from_dict(data):
    known = {f.name for f in fields(ExperimentConfig)}
    flat = {}
    for key, val in data.items():
        if key in _GROUPS:
            for name, v in val.items():
                if name not in _GROUPS[key]:
                    raise ValueError("unknown config key %s.%s" % (key, name))
                flat[name] = v
        elif key in _TOP_LEVEL:
            flat[key] = val
        else:
            raise ValueError("unknown config key %r" % (key,))
    bad = set(flat) - known
    if bad:
        raise ValueError("unknown config keys %s" % (sorted(bad),))
    return ExperimentConfig(**flat)


def config_digest(cfg):
    """sha256 over the canonical JSON form of the resolved config."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True,
                      separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError("config %s is not a key-value tree" % (path,))
    return config_from_dict(data)


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
