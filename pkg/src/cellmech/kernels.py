"""Backend selection for the patch assembly kernels.

The compiled extension is preferred; the NumPy module is a drop-in twin
used when the extension is unavailable or when CELLMECH_PURE_PYTHON=1 is
set in the environment (useful for debugging and for the benchmark).
"""

import os

if os.environ.get("CELLMECH_PURE_PYTHON") == "1":
    from . import _kernels_np as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        from . import _kernels_np as _impl

BACKEND = _impl.BACKEND
reference_tables = _impl.reference_tables
energy_min_det = _impl.energy_min_det
residual = _impl.residual
hessian = _impl.hessian
mixed_vjp = _impl.mixed_vjp


def get_backend():
    """Name of the active kernel backend, "cython" or "numpy"."""
    return BACKEND
