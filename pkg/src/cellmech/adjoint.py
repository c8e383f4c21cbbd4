"""Equilibrium-constrained gradients via the adjoint method.

The forward solve finds q* with zero residual on free entries and
prescribed values q_c = X_c + C a on constrained entries.  A scalar
loss L(q*) then has exact total derivatives from a single linear solve
with the same stiffness matrix Newton's method already factors:

    H_ff lam  = (dL/dq)_f
    dL/da     = (dL/dq)_c C - lam^T H_fc C
    dL/dphi   = (dL/dX)_explicit dX/dphi - lam^T (dR_f/dX) (dX/dphi)

phi collects the geometry parameters (pore radii and interior corner
offsets).  dX/dphi is the exact bilinear geometry Jacobian; the mixed
derivative dR_f/dX is applied in vector-Jacobian form patch by patch
and never materialized.  Constrained entries sit on the outer domain
boundary, which the geometry parameters do not move, so dq_c/dphi = 0.
"""

import numpy as np
from dataclasses import dataclass

from .geometry import (
    build_dof_map,
    build_reference,
    default_params,
    reference_jacobian,
)
from .mechanics import PatchSystem
from .solver import SolveSettings, newton_solve, linear_solve


@dataclass
class GradientBundle:
    """Loss gradients w.r.t. actuation and geometry parameters."""

    actuation: np.ndarray  # (k,)
    radii: np.ndarray      # (n_cells, 16), or None if not requested
    corners: np.ndarray    # (n_interior, 2), or None if not requested


def adjoint_state(system, q, dL_dq, settings=None):
    """Multipliers lam solving H_ff lam = (dL/dq)_f at equilibrium q.

    dL_dq is (G, 2) or flat (2G,).  Returns (lam, H, g) with H the full
    assembled stiffness and g the flattened loss gradient, both reused
    by the parameter-gradient formulas.
    """
    dm = system.dofmap
    H = system.hessian(q)
    g = np.asarray(dL_dq, dtype=float).reshape(-1)
    if g.size != dm.n_entries:
        raise ValueError("dL_dq has %d entries, expected %d" % (g.size, dm.n_entries))
    lam = linear_solve(H[dm.free][:, dm.free].tocsr(), g[dm.free], settings)
    return lam, H, g


def actuation_gradient(system, H, g, lam):
    """dL/da = (dL/dq)_c C - lam^T H_fc C."""
    dm = system.dofmap
    con = dm.constrained
    return (g[con] - H[con][:, dm.free] @ lam) @ dm.C


def geometry_gradient(system, q, lam, layout, params, dL_dX=None, ref_jac=None):
    """dL/d(radii), dL/d(corners) through the reference geometry.

    dL_dX, if given, is the explicit (P, 25, 2) derivative of the loss
    w.r.t. reference control coordinates at fixed q; the implicit part
    -lam^T dR/dX is added to it before chaining with dX/dphi.
    """
    dm = system.dofmap
    lam_global = np.zeros((dm.n_groups, 2))
    lam_global.reshape(-1)[dm.free] = lam
    w = -system.mixed_vjp(q, lam_global)
    if dL_dX is not None:
        w = w + dL_dX
    if ref_jac is None:
        ref_jac = reference_jacobian(layout, params)
    flat = ref_jac.T @ w.ravel()
    n_rad = layout.n_cells * 16
    radii = flat[:n_rad].reshape(layout.n_cells, 16)
    corners = flat[n_rad:].reshape(-1, 2)
    return radii, corners


def adjoint_gradients(system, q, dL_dq, layout=None, params=None, *,
                      dL_dX=None, ref_jac=None, settings=None):
    """All parameter gradients of a loss at the equilibrium q.

    Geometry gradients are computed only when layout and params (or a
    precomputed ref_jac with layout) are supplied.
    """
    lam, H, g = adjoint_state(system, q, dL_dq, settings)
    grad_a = actuation_gradient(system, H, g, lam)
    if layout is None:
        return GradientBundle(grad_a, None, None)
    radii, corners = geometry_gradient(system, q, lam, layout, params,
                                       dL_dX=dL_dX, ref_jac=ref_jac)
    return GradientBundle(grad_a, radii, corners)


def _solve_loss(layout, params, a, c, settings):
    """Helper for finite differencing: re-solve and evaluate c . q*."""
    nets = build_reference(layout, params)
    dm = build_dof_map(nets, layout)
    system = PatchSystem(nets, dm)
    res = newton_solve(system, a, settings)
    return float(c.ravel() @ res.q.ravel()), system, res


def gradcheck(layout, params=None, *, seed=0, delta=1e-4, n_radii=4,
              n_corners=3, settings=None):
    """Adjoint vs central finite differences through full re-solves.

    Uses a random linear loss c . q* and a deterministic actuation at
    15% of the cell width.  Finite differences sample every actuation
    channel plus n_radii radius and n_corners corner components.  The
    reported errors are norm-wise relative over each sampled family:
    ||adj - fd|| / ||fd||.  Returns a dict with per-family errors and
    their max.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = default_params(layout)
        params.radii[:] = rng.uniform(0.35, 0.65, size=params.radii.shape)
    if settings is None:
        settings = SolveSettings(newton_tol=1e-12)
    a = np.full(layout.num_channels, 0.15 * layout.cell_width)
    nets = build_reference(layout, params)
    system = PatchSystem(nets, build_dof_map(nets, layout))
    res = newton_solve(system, a, settings)
    c = rng.standard_normal((system.dofmap.n_groups, 2))
    base_loss = float(c.ravel() @ res.q.ravel())

    bundle = adjoint_gradients(system, res.q, c, layout, params,
                               settings=settings)

    def fd_pair(params_lo, params_hi, a_lo, a_hi):
        lo, _, _ = _solve_loss(layout, params_lo, a_lo, c, settings)
        hi, _, _ = _solve_loss(layout, params_hi, a_hi, c, settings)
        return (hi - lo) / (2.0 * delta)

    errors = {}
    fd = np.empty(layout.num_channels)
    for i in range(layout.num_channels):
        e = np.zeros(layout.num_channels)
        e[i] = delta
        fd[i] = fd_pair(params, params, a - e, a + e)
    errors["actuation"] = _rel(bundle.actuation, fd)

    flat_idx = rng.choice(params.radii.size, size=n_radii, replace=False)
    fd = np.empty(n_radii)
    for k, idx in enumerate(flat_idx):
        lo, hi = params.copy(), params.copy()
        lo.radii.ravel()[idx] -= delta
        hi.radii.ravel()[idx] += delta
        fd[k] = fd_pair(lo, hi, a, a)
    errors["radii"] = _rel(bundle.radii.ravel()[flat_idx], fd)

    if params.corners.size:
        flat_idx = rng.choice(params.corners.size, size=n_corners, replace=False)
        fd = np.empty(n_corners)
        for k, idx in enumerate(flat_idx):
            lo, hi = params.copy(), params.copy()
            lo.corners.ravel()[idx] -= delta
            hi.corners.ravel()[idx] += delta
            fd[k] = fd_pair(lo, hi, a, a)
        errors["corners"] = _rel(bundle.corners.ravel()[flat_idx], fd)

    errors["max"] = max(v for k, v in errors.items())
    errors["loss"] = base_loss
    return errors


def _rel(adj, fd):
    return float(np.linalg.norm(adj - fd) / max(np.linalg.norm(fd), 1e-30))
