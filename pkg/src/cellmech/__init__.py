"""Differentiable cellular-metamaterial mechanics and co-design training."""

from .adjoint import adjoint_gradients
from .geometry import (CellLayout, GeometryParams, build_dof_map,
                       build_reference, default_params, make_layout)
from .kernels import get_backend
from .mechanics import Material, PatchSystem
from .neural import MlpSpec, forward, init_weights
from .solver import SolveSettings, newton_solve
from .tasks import TaskInstance, task_gradients, task_loss

__version__ = "0.1.0"

__all__ = [
    "CellLayout", "GeometryParams", "Material", "MlpSpec", "PatchSystem",
    "SolveSettings", "TaskInstance", "adjoint_gradients", "build_dof_map",
    "build_reference", "default_params", "forward", "get_backend",
    "init_weights", "make_layout", "newton_solve", "task_gradients",
    "task_loss", "__version__",
]
