"""Training harness: configs, checkpoints, the bi-level loop and rendering."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_digest, load_config, save_config
from .render import render_svg
from .train import TrainingAborted, evaluate, train

__all__ = [
    "Checkpoint",
    "ExperimentConfig",
    "TrainingAborted",
    "config_digest",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "render_svg",
    "save_checkpoint",
    "save_config",
    "train",
]
