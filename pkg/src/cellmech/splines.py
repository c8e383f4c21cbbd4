"""Quadratic B-spline bases, tensor-product patch mappings and quadrature.

Every patch in the solver uses the same scalar basis in each parametric
direction: an open uniform knot vector on [0, 1] with a fixed number of
control points.  This module provides basis evaluation, per-knot-span
Gauss-Legendre quadrature, the control-net mapping from the parent square
to physical space, its Jacobian, and local inversion of the mapping.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BasisSpec",
    "QuadratureRule",
    "ControlNet",
    "basis_eval",
    "basis_eval_all",
    "basis_deriv_all",
    "greville_abscissae",
    "make_quadrature",
    "basis_tables",
    "patch_map",
    "patch_jacobian",
    "invert_map",
]


def _open_uniform_knots(degree, num_ctrl):
    interior = num_ctrl - degree - 1
    body = np.linspace(0.0, 1.0, interior + 2)
    return np.concatenate([np.zeros(degree), body, np.ones(degree)])


@dataclass(frozen=True)
class BasisSpec:
    """Scalar B-spline basis on [0, 1] with an open uniform knot vector."""

    degree: int = 2
    num_ctrl: int = 5
    knots: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.knots is None:
            object.__setattr__(
                self, "knots", _open_uniform_knots(self.degree, self.num_ctrl)
            )
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if knots.size != self.num_ctrl + self.degree + 1:
            raise ValueError("knot count must equal num_ctrl + degree + 1")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be nondecreasing")
        p = self.degree
        if np.any(knots[: p + 1] != knots[0]) or np.any(knots[-(p + 1):] != knots[-1]):
            raise ValueError("first/last knot must repeat degree+1 times")

    def spans(self):
        """Nonempty knot spans as an array of (lo, hi) rows."""
        uniq = np.unique(self.knots)
        return np.stack([uniq[:-1], uniq[1:]], axis=1)


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product quadrature points in the parent square [0,1]^2."""

    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,)

    @property
    def size(self):
        return self.weights.size


def _check_domain(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < -1e-12) or np.any(x > 1 + 1e-12):
        raise ValueError("parameter outside [0, 1]")
    return np.clip(x, 0.0, 1.0)


def basis_eval_all(spec, x):
    """Evaluate every basis function at points ``x``.

    Returns an array of shape ``x.shape + (num_ctrl,)``.  Uses the
    bottom-up degree-elevation recurrence on the full table at once.
    """
    x = _check_domain(x)
    xs = np.atleast_1d(x)
    k = spec.knots
    n_fun = spec.num_ctrl
    # degree-0 indicators; the last span is closed on the right
    n_spans = k.size - 1
    vals = np.zeros(xs.shape + (n_spans,))
    last = k[-1]
    for i in range(n_spans):
        if k[i] == k[i + 1]:
            continue
        hit = (xs >= k[i]) & (xs < k[i + 1])
        if k[i + 1] == last:
            hit |= xs == last
        vals[..., i] = hit
    for p in range(1, spec.degree + 1):
        new = np.zeros(xs.shape + (n_spans - p,))
        for i in range(n_spans - p):
            d1 = k[i + p] - k[i]
            d2 = k[i + p + 1] - k[i + 1]
            term = 0.0
            if d1 > 0:
                term = (xs - k[i]) / d1 * vals[..., i]
            if d2 > 0:
                term = term + (k[i + p + 1] - xs) / d2 * vals[..., i + 1]
            new[..., i] = term
        vals = new
    out = vals[..., :n_fun]
    return out[0] if np.isscalar(x) or np.ndim(x) == 0 else out.reshape(np.shape(x) + (n_fun,))


def basis_eval(spec, index, x):
    """Value of basis function ``index`` at ``x`` in [0, 1]."""
    if not 0 <= index < spec.num_ctrl:
        raise ValueError("basis index out of range")
    return float(basis_eval_all(spec, float(x))[index])


def basis_deriv_all(spec, x):
    """First derivative of every basis function at points ``x``."""
    x = _check_domain(x)
    p = spec.degree
    k = spec.knots
    lower = BasisSpec(degree=p - 1, num_ctrl=spec.num_ctrl + 1, knots=k)
    low = np.atleast_2d(basis_eval_all(lower, np.atleast_1d(x)))
    n_fun = spec.num_ctrl
    out = np.zeros(low.shape[:-1] + (n_fun,))
    for i in range(n_fun):
        d1 = k[i + p] - k[i]
        d2 = k[i + p + 1] - k[i + 1]
        term = 0.0
        if d1 > 0:
            term = p / d1 * low[..., i]
        if d2 > 0:
            term = term - p / d2 * low[..., i + 1]
        out[..., i] = term
    return out[0] if np.ndim(x) == 0 else out.reshape(np.shape(x) + (n_fun,))


def greville_abscissae(spec):
    """Knot averages; control values placed there reproduce linears."""
    p, k = spec.degree, spec.knots
    return np.array([k[i + 1: i + p + 1].mean() for i in range(spec.num_ctrl)])


def make_quadrature(spec, points_per_span=5):
    """Per-knot-span Gauss-Legendre rule on the parent square.

    The tensor product of the 1D rules over each nonempty span is exact
    for polynomials up to degree ``2*points_per_span - 1`` per direction
    within each span, which covers all products of basis functions.
    """
    nodes, wts = np.polynomial.legendre.leggauss(points_per_span)
    xs, ws = [], []
    for lo, hi in spec.spans():
        h = hi - lo
        xs.append(lo + (nodes + 1) * 0.5 * h)
        ws.append(wts * 0.5 * h)
    x1 = np.concatenate(xs)
    w1 = np.concatenate(ws)
    pts = np.stack(
        [np.repeat(x1, x1.size), np.tile(x1, x1.size)], axis=1
    )
    wgt = np.repeat(w1, w1.size) * np.tile(w1, w1.size)
    return QuadratureRule(points=pts, weights=wgt)


def basis_tables(spec, quad):
    """Tabulate values and parent-domain gradients at quadrature points.

    Returns ``(B, dB)`` with shapes (nq, n^2) and (nq, n^2, 2) where the
    flattened function index is ``a = i*n + j`` for the tensor-product
    function ``N_i(xi) * N_j(eta)``.
    """
    xi = quad.points[:, 0]
    eta = quad.points[:, 1]
    bx = basis_eval_all(spec, xi)       # (nq, n)
    by = basis_eval_all(spec, eta)
    dbx = basis_deriv_all(spec, xi)
    dby = basis_deriv_all(spec, eta)
    n = spec.num_ctrl
    nq = xi.size
    B = (bx[:, :, None] * by[:, None, :]).reshape(nq, n * n)
    dB = np.empty((nq, n * n, 2))
    dB[:, :, 0] = (dbx[:, :, None] * by[:, None, :]).reshape(nq, n * n)
    dB[:, :, 1] = (bx[:, :, None] * dby[:, None, :]).reshape(nq, n * n)
    return B, dB


@dataclass
class ControlNet:
    """A grid of 2D control points defining one patch mapping.

    ``coords[i, j]`` weighs the tensor-product function ``N_i(xi)*N_j(eta)``.
    """

    coords: np.ndarray  # (n, n, 2)
    spec: BasisSpec = field(default_factory=BasisSpec)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        n = self.spec.num_ctrl
        if self.coords.shape != (n, n, 2):
            raise ValueError(f"control net must have shape ({n}, {n}, 2)")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("control coordinates must be finite")

    @property
    def flat(self):
        """(n^2, 2) view consistent with the flattened basis index."""
        return self.coords.reshape(-1, 2)


def patch_map(net, xi, eta):
    """Map parent coordinates to physical space through the control net."""
    bx = basis_eval_all(net.spec, np.asarray(xi, dtype=float))
    by = basis_eval_all(net.spec, np.asarray(eta, dtype=float))
    return np.einsum("...i,...j,ijk->...k", bx, by, net.coords)


def patch_jacobian(net, xi, eta):
    """Analytic d(x,y)/d(xi,eta) of the patch mapping, shape (..., 2, 2)."""
    bx = basis_eval_all(net.spec, np.asarray(xi, dtype=float))
    by = basis_eval_all(net.spec, np.asarray(eta, dtype=float))
    dbx = basis_deriv_all(net.spec, np.asarray(xi, dtype=float))
    dby = basis_deriv_all(net.spec, np.asarray(eta, dtype=float))
    col0 = np.einsum("...i,...j,ijk->...k", dbx, by, net.coords)
    col1 = np.einsum("...i,...j,ijk->...k", bx, dby, net.coords)
    return np.stack([col0, col1], axis=-1)


def invert_map(net, target, guess=(0.5, 0.5), tol=1e-10, max_iter=50):
    """Find parent coordinates mapping to ``target``, or None.

    Damped Newton iteration projected onto the parent square.  Failure to
    converge (target outside the patch image, or a stalled step) returns
    None so the caller can try another patch.
    """
    target = np.asarray(target, dtype=float)
    u = np.clip(np.asarray(guess, dtype=float), 0.0, 1.0)
    r = patch_map(net, u[0], u[1]) - target
    rn = np.linalg.norm(r)
    for _ in range(max_iter):
        if rn <= tol:
            return float(u[0]), float(u[1])
        J = patch_jacobian(net, u[0], u[1])
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        if abs(det) < 1e-300:
            return None
        step = np.linalg.solve(J, -r)
        alpha = 1.0
        while True:
            u_new = np.clip(u + alpha * step, 0.0, 1.0)
            if np.linalg.norm(u_new - u) < 1e-10:
                # projected step stalled on the boundary
                return None
            r_new = patch_map(net, u_new[0], u_new[1]) - target
            rn_new = np.linalg.norm(r_new)
            if rn_new < rn:
                break
            alpha *= 0.5
            if alpha < 1e-10:
                return None
        u, r, rn = u_new, r_new, rn_new
    return (float(u[0]), float(u[1])) if rn <= tol else None
