"""Static equilibrium by Newton's method with adaptive incremental loading.

Prescribed boundary displacements are ramped by a load factor; each
increment is solved by Newton iteration on the free entries with an
inversion-guarded Armijo line search, warm-started from the previous
increment.  When an increment fails, the remaining schedule is refined by
halving the step, up to a cap.  Everything is deterministic: fixed
assembly order, a direct sparse LU factorization by default (GMRES with an
incomplete LU preconditioner is available as an option).
"""

import json
import numpy as np
from dataclasses import dataclass
from scipy.sparse.linalg import LinearOperator, gmres, spilu, splu

from .mechanics import InversionError

ALPHA_MIN = 2.0**-30
ARMIJO_C1 = 1e-4


class SolverError(RuntimeError):
    pass


class NonconvergenceError(SolverError):
    """Adaptive loading ran out of halvings; carries the last good factor."""

    def __init__(self, message, last_good_lambda):
        super().__init__(message)
        self.last_good_lambda = last_good_lambda


@dataclass
class SolveSettings:
    newton_tol: float = 1e-8
    max_newton_iters: int = 50
    initial_increments: int = 10
    max_increment_halvings: int = 8
    linear_solver: str = "direct_lu"  # direct_lu | gmres_ilu
    gmres_tol: float = 1e-8
    gmres_restart: int = 100

    def __post_init__(self):
        if self.linear_solver not in ("direct_lu", "gmres_ilu"):
            raise ValueError("unknown linear solver %r" % (self.linear_solver,))
        if min(self.newton_tol, self.max_newton_iters, self.initial_increments,
               self.gmres_tol, self.gmres_restart) <= 0:
            raise ValueError("solver settings must be positive")


@dataclass
class SolveResult:
    q: np.ndarray  # (G, 2) deformed positions
    energy: float
    converged: bool
    increments: list  # one dict per increment: lam, residuals, energies
    final_residual: float
    min_det: float

    @property
    def newton_iterations_per_increment(self):
        return [len(inc["residuals"]) - 1 for inc in self.increments]


def linear_solve(H, b, settings=None):
    """Solve H x = b for the sparse symmetric Hessian block.

    Verifies the backward error against the configured tolerance so a
    near-singular factorization cannot return silent garbage.
    """
    settings = settings or SolveSettings()
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if settings.linear_solver == "direct_lu":
        try:
            x = splu(H.tocsc()).solve(b)
        except RuntimeError as err:  # singular factor
            raise SolverError("LU factorization failed: %s" % err) from err
    else:
        try:
            ilu = spilu(H.tocsc(), drop_tol=0.0, fill_factor=1.0)
        except RuntimeError as err:
            raise SolverError("ILU factorization failed: %s" % err) from err
        M = LinearOperator(H.shape, ilu.solve)
        x, info = gmres(
            H, b, M=M, rtol=settings.gmres_tol, atol=0.0,
            restart=settings.gmres_restart, maxiter=settings.gmres_restart,
        )
        if info != 0:
            raise SolverError("GMRES stagnated (info=%d)" % info)
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values")
    err = np.linalg.norm(H @ x - b)
    if err > max(settings.gmres_tol, 1e-8) * bnorm:
        raise SolverError(
            "linear solve backward error %.3e exceeds tolerance" % (err / bnorm)
        )
    return x


class _LineSearchFailure(Exception):
    pass


def line_search(system, q, direction, free, psi, slope):
    """Backtrack alpha from 1 by halving until the step is admissible.

    Admissible means det F > 0 at every quadrature point and the Armijo
    sufficient-decrease condition holds.  Returns (alpha, q_new, psi_new,
    min_det); raises _LineSearchFailure below the 2^-30 floor.
    """
    alpha = 1.0
    flat = q.ravel()
    while alpha >= ALPHA_MIN:
        trial = flat.copy()
        trial[free] += alpha * direction
        trial = trial.reshape(-1, 2)
        psi_t, min_det = system.energy(trial)
        if min_det > 0.0 and psi_t <= psi + ARMIJO_C1 * alpha * slope:
            return alpha, trial, psi_t, min_det
        alpha *= 0.5
    raise _LineSearchFailure


def _characteristic_force(system, u_con):
    """Linear-response force norm of the full constraint displacement.

    Measured by a small scaled application of the prescribed jump; sizes
    the absolute convergence floor so that a residual already down at the
    assembly roundoff plateau is accepted instead of iterated on noise.
    """
    s = 1e-3
    q = system.X_global.copy()
    q.ravel()[system.dofmap.constrained] += s * u_con
    val = float(np.linalg.norm(system.residual(q).ravel()[system.dofmap.free]))
    return val / s if np.isfinite(val) else 0.0


def _solve_increment(system, q, lam, u_con, settings, abs_floor):
    """One load increment: Newton iterations at fixed load factor lam.

    Converges when the residual norm drops below newton_tol times the
    increment's post-jump residual, or below abs_floor. Returns
    (q, log dict) on success; raises _LineSearchFailure or SolverError
    to signal the caller to halve the increment.
    """
    dm = system.dofmap
    free, con = dm.free, dm.constrained
    X_flat = system.X_global.ravel()
    q = q.copy()
    q.ravel()[con] = X_flat[con] + lam * u_con
    psi, min_det = system.energy(q)
    if min_det <= 0.0:
        raise _LineSearchFailure  # load jump already inverts elements
    residuals, energies = [], [psi]
    tol = None
    for _ in range(settings.max_newton_iters):
        r = system.residual(q).ravel()[free]
        rnorm = float(np.linalg.norm(r))
        residuals.append(rnorm)
        if tol is None:
            tol = max(settings.newton_tol * rnorm, abs_floor)
        if rnorm <= tol:
            log = {"lam": lam, "residuals": residuals, "energies": energies,
                   "min_det": min_det}
            return q, log
        H = system.hessian(q)
        H_ff = H[free][:, free].tocsr()
        d = linear_solve(H_ff, -r, settings)
        slope = float(r @ d)
        if slope >= 0.0:
            raise _LineSearchFailure  # indefinite Hessian, not a descent step
        _, q, psi, min_det = line_search(system, q, d, free, psi, slope)
        energies.append(psi)
    raise _LineSearchFailure  # Newton budget exhausted


def newton_solve(system, a, settings=None, q_init=None, log_stream=None):
    """Equilibrium under actuation a, ramped with adaptive increments.

    The constrained entries are prescribed X_c + lam * C a for load factors
    lam climbing from 0 to 1 in steps of 1/initial_increments; a failed
    increment halves the remaining step resolution (up to the configured
    number of halvings) and retries from the last converged state.

    With q_init the full load is attempted directly from the guess, and
    only on failure does the solve restart from the reference ramp.
    """
    settings = settings or SolveSettings()
    dm = system.dofmap
    u_con = dm.C @ np.asarray(a, dtype=float)
    q = (q_init if q_init is not None else system.X_global).copy()
    eps = np.finfo(float).eps
    abs_floor = max(1e-14, 1e3 * eps * _characteristic_force(system, u_con))
    increments = []
    if q_init is not None:
        try:
            q, log = _solve_increment(system, q, 1.0, u_con, settings, abs_floor)
        except (_LineSearchFailure, SolverError, InversionError):
            q = system.X_global.copy()
        else:
            increments.append(log)
            if log_stream is not None:
                log_stream.write(json.dumps(log) + "\n")
            psi, min_det = system.energy(q)
            return SolveResult(
                q=q, energy=psi, converged=True, increments=increments,
                final_residual=log["residuals"][-1], min_det=min_det,
            )
    lam = 0.0
    step = 1.0 / settings.initial_increments
    halvings = 0
    while lam < 1.0 - 1e-12:
        target = lam + step
        if target >= 1.0 - 1e-12:
            target = 1.0
        try:
            q, log = _solve_increment(system, q, target, u_con, settings, abs_floor)
        except (_LineSearchFailure, SolverError, InversionError):
            halvings += 1
            if halvings > settings.max_increment_halvings:
                raise NonconvergenceError(
                    "no convergence at load factor %.6f" % lam, lam
                )
            step *= 0.5
            continue
        lam = target
        increments.append(log)
        if log_stream is not None:
            log_stream.write(json.dumps(log) + "\n")
    psi, min_det = system.energy(q)
    final_res = increments[-1]["residuals"][-1] if increments else 0.0
    return SolveResult(
        q=q, energy=psi, converged=True, increments=increments,
        final_residual=final_res, min_det=min_det,
    )
