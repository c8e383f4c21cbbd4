"""Task distributions and loss functions: translation, rotation, shape.

Each loss returns (value, dL_dq) with dL_dq shaped (G, 2) over shared
control points, ready for the adjoint solve.  Material markers are
defined on the central cell's pore boundary:

  * translation pointer: mean of the 16 pore control points;
  * rotation stick: the two pore points on the side-midpoint rays
    (left and right), a marked material pair symmetric about the pore
    center.  A stick reaching a full cell width from the center would
    end inside the neighboring pores, not on material, so the pore
    boundary pair is used and the stick length is reported with it.

Shape matching compares the deformed middle-pore boundary, resampled
to n points by arc length, against a sampled target outline after
centering, scale normalization, and closed-form optimal rotation
(rotation-only orthogonal Procrustes).  The loss is the mean l1
distance over corresponding points, and its gradient is propagated
through the normalization and the optimal rotation angle.
"""

import numpy as np
from dataclasses import dataclass, field

from .geometry import pore_groups
from .splines import BasisSpec, basis_eval_all

RIGHT_RAY = 6   # pore point on the right side-midpoint ray
LEFT_RAY = 14   # pore point on the left side-midpoint ray


@dataclass
class TaskInstance:
    """One sampled task: a kind tag plus its descriptor."""

    kind: str
    descriptor: np.ndarray

    def __post_init__(self):
        self.descriptor = np.atleast_1d(np.asarray(self.descriptor, dtype=float))
        dims = {"translation": 2, "rotation": 1}
        if self.kind in dims and self.descriptor.size != dims[self.kind]:
            raise ValueError("%s descriptor needs %d entries"
                             % (self.kind, dims[self.kind]))


# ---------------------------------------------------------------------------
# translation

def pointer_groups(system, layout):
    """Group ids of the central pore's 16 boundary points."""
    return pore_groups(system.dofmap, layout.center_cell)


def pointer_position(system, layout, q):
    return q[pointer_groups(system, layout)].mean(axis=0)


def sample_translation(layout, rng, box_scale=1.2):
    """Target uniform in a square of side box_scale x cell width.

    The box is centered on the undeformed pointer of the default
    geometry, i.e. the domain center, and stays fixed in the lab frame
    while geometry training moves the material.
    """
    w = layout.cell_width
    center = np.array([0.5 * layout.cols * w, 0.5 * layout.rows * w])
    half = 0.5 * box_scale * w
    return TaskInstance("translation", center + rng.uniform(-half, half, size=2))


def translation_loss(system, layout, q, target):
    """Squared distance of the deformed pointer from the target."""
    groups = pointer_groups(system, layout)
    err = q[groups].mean(axis=0) - np.asarray(target, dtype=float)
    dL_dq = np.zeros((system.dofmap.n_groups, 2))
    dL_dq[groups] = 2.0 * err / groups.size
    return float(err @ err), dL_dq


# ---------------------------------------------------------------------------
# rotation

def stick_groups(system, layout):
    """(left, right) group ids of the stick endpoint material points."""
    g = pore_groups(system.dofmap, layout.center_cell)
    return np.array([g[LEFT_RAY], g[RIGHT_RAY]])


def stick_length(system, layout):
    ends = system.X_global[stick_groups(system, layout)]
    return float(np.linalg.norm(ends[1] - ends[0]))


def sample_rotation(rng, angle_range):
    lo, hi = angle_range
    return TaskInstance("rotation", rng.uniform(lo, hi))


def rotation_loss(system, layout, q, angle):
    """Mean squared endpoint error against the rotated undeformed stick.

    Targets are the undeformed endpoints rotated counter-clockwise by
    the task angle about their midpoint.
    """
    groups = stick_groups(system, layout)
    ends0 = system.X_global[groups]
    center = ends0.mean(axis=0)
    t = float(np.asarray(angle).ravel()[0])
    c, s = np.cos(t), np.sin(t)
    R = np.array([[c, -s], [s, c]])
    targets = center + (ends0 - center) @ R.T
    err = q[groups] - targets
    dL_dq = np.zeros((system.dofmap.n_groups, 2))
    dL_dq[groups] = err  # d/dq of mean(|e1|^2, |e2|^2)
    return float(np.sum(err ** 2) / 2.0), dL_dq


def rotation_reference_term(system, layout, q, angle):
    """d(loss)/d(reference positions) holding q fixed, as a (G, 2) array.

    The targets are built from the undeformed endpoints, so moving the
    reference geometry moves the targets: for endpoint e the chain is
    dt_e/dX_e = R and dt_e/dc = I - R through the shared midpoint c.
    """
    groups = stick_groups(system, layout)
    ends0 = system.X_global[groups]
    center = ends0.mean(axis=0)
    t = float(np.asarray(angle).ravel()[0])
    c, s = np.cos(t), np.sin(t)
    R = np.array([[c, -s], [s, c]])
    err = q[groups] - (center + (ends0 - center) @ R.T)
    half = 0.5 * (err.sum(axis=0) @ (np.eye(2) - R))
    dX = np.zeros((system.dofmap.n_groups, 2))
    for e in range(2):
        dX[groups[e]] = -(err[e] @ R) - half
    return dX


# ---------------------------------------------------------------------------
# shape family: log Gaussian process outline via random Fourier features

@dataclass
class ShapeFamilyParams:
    """Frozen random Fourier features of a periodic log-radius GP."""

    n_features: int = 64
    lengthscale: float = 0.8
    variance: float = 0.04
    n_points: int = 49
    freqs: np.ndarray = None
    phases: np.ndarray = None

    @property
    def angles(self):
        return 2.0 * np.pi * np.arange(self.n_points) / self.n_points

    def feature_matrix(self, thetas=None):
        """cos(w_f theta + phi_f) rows, shape (n_angles, n_features)."""
        th = self.angles if thetas is None else np.asarray(thetas)
        return np.cos(np.outer(th, self.freqs) + self.phases)


def make_shape_family(seed, n_features=64, lengthscale=0.8, variance=0.04,
                      n_points=49):
    """Sample the family's frequencies and phases once.

    Frequencies are integer (rounded normal draws with std 1/lengthscale)
    so every sampled outline is exactly 2 pi periodic.
    """
    rng = np.random.default_rng(seed)
    freqs = np.rint(rng.normal(0.0, 1.0 / lengthscale, size=n_features))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    return ShapeFamilyParams(n_features, lengthscale, variance, n_points,
                             freqs, phases)


def sample_shape(family, rng):
    """One outline: radius exp(g(theta)) at the family's equispaced angles."""
    w = rng.normal(0.0, np.sqrt(family.variance / family.n_features),
                   size=family.n_features)
    g = family.feature_matrix() @ w
    r = np.exp(g)
    th = family.angles
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def family_covariance(family):
    """Exact covariance of g over weight draws for the frozen features."""
    F = family.feature_matrix()
    return (family.variance / family.n_features) * (F @ F.T)


# ---------------------------------------------------------------------------
# deformed pore boundary, resampled by arc length

_SPEC = BasisSpec()


def pore_boundary_matrix(system, layout, q, n_points=49, dense_per_edge=128,
                         cell=None):
    """Arc-length resampled pore outline as a linear map of control points.

    Walks the four deformed pore-arc spline edges counter-clockwise,
    measures arc length from the right side-midpoint ray (matching the
    target convention theta_0 = 0), and places n_points equally spaced
    points.  Returns (points, S, groups): points = S @ q[groups], with
    the resampling parameters treated as constants of the current
    configuration, so S is also the exact evaluation Jacobian at fixed
    parameters.
    """
    if cell is None:
        cell = layout.center_cell
    groups = pore_groups(system.dofmap, cell)
    ctrl = q[groups]  # (16, 2)
    K = dense_per_edge
    ts = np.linspace(0.0, 1.0, K + 1)
    Bmat = basis_eval_all(_SPEC, ts)  # (K+1, 5)

    # dense closed polyline and per-sample basis rows over the 16 points
    dense = np.empty((4 * K, 2))
    rows = np.zeros((4 * K, 16))
    for p in range(4):
        idx = [(4 * p + i) % 16 for i in range(5)]
        dense[p * K:(p + 1) * K] = Bmat[:-1] @ ctrl[idx]
        rows[p * K:(p + 1) * K, idx] = Bmat[:-1]

    start = 1 * K + K // 2  # edge 1 (right side), parametric midpoint
    dense = np.roll(dense, -start, axis=0)
    rows = np.roll(rows, -start, axis=0)

    seg = np.diff(np.vstack([dense, dense[:1]]), axis=0)
    lens = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    total = cum[-1]
    if total <= 0.0:
        raise ValueError("degenerate pore boundary")
    targets = total * np.arange(n_points) / n_points
    k = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, 4 * K - 1)
    frac = (targets - cum[k]) / np.maximum(lens[k], 1e-300)
    nxt = (k + 1) % (4 * K)
    S = (1.0 - frac)[:, None] * rows[k] + frac[:, None] * rows[nxt]
    points = (1.0 - frac)[:, None] * dense[k] + frac[:, None] * dense[nxt]
    return points, S, groups


# ---------------------------------------------------------------------------
# scale/rotation-invariant l1 shape loss

def _normalize(pts):
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum(centered ** 2, axis=1)))
    if scale <= 0.0:
        raise ValueError("degenerate (all-coincident) point set")
    return centered / scale, scale


def shape_match_loss(points, target):
    """Mean l1 deviation after centering, scaling, optimal rotation.

    Both point sets are centered and scaled to unit RMS radius; the
    points are then rotated onto the target by the closed-form
    orthogonal Procrustes rotation (no reflection).  Returns
    (loss, dL/dpoints), with the gradient taken through the
    normalization and the optimal angle.
    """
    X = np.asarray(points, dtype=float)
    Y = np.asarray(target, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 2:
        raise ValueError("point sets must share shape (n, 2)")
    n = X.shape[0]
    Xn, sx = _normalize(X)
    Yn, _ = _normalize(Y)

    # optimal rotation angle: maximize cos(phi) P + sin(phi) Q
    P = float(np.sum(Xn * Yn))
    Q = float(np.sum(Xn[:, 0] * Yn[:, 1] - Xn[:, 1] * Yn[:, 0]))
    phi = np.arctan2(Q, P)
    c, s = np.cos(phi), np.sin(phi)
    R = np.array([[c, -s], [s, c]])

    delta = Xn @ R.T - Yn
    loss = float(np.mean(np.abs(delta).sum(axis=1)))

    G = np.sign(delta) / n                       # dL/ddelta
    dphi_term = float(np.sum(G * (Xn @ np.array([[-s, -c], [c, -s]]).T)))
    denom = P * P + Q * Q
    dphi_dXn = (P * np.column_stack([Yn[:, 1], -Yn[:, 0]]) - Q * Yn) / denom
    g = G @ R + dphi_term * dphi_dXn             # dL/dXn
    # back through centering and RMS scaling (sum Xn = 0 simplifies)
    proj = float(np.sum(g * Xn)) / n
    dX = (g - g.mean(axis=0) - proj * Xn) / sx
    return loss, dX


def shape_loss(system, layout, q, target, n_points=49):
    """Shape-matching loss of the deformed middle pore, with dL/dq."""
    points, S, groups = pore_boundary_matrix(system, layout, q, n_points)
    loss, dP = shape_match_loss(points, target)
    dL_dq = np.zeros((system.dofmap.n_groups, 2))
    np.add.at(dL_dq, groups, S.T @ dP)
    return loss, dL_dq


# ---------------------------------------------------------------------------
# dispatch used by the trainer and evaluators

def task_loss(system, layout, q, task):
    if task.kind == "translation":
        return translation_loss(system, layout, q, task.descriptor)
    if task.kind == "rotation":
        return rotation_loss(system, layout, q, task.descriptor)
    if task.kind == "shape":
        return shape_loss(system, layout, q,
                          task.descriptor.reshape(-1, 2))
    raise ValueError("unknown task kind %r" % task.kind)


def task_gradients(system, layout, q, task):
    """(loss, dL_dq, dL_dX) with the explicit reference-geometry term.

    dL_dX is a global (G, 2) array or None when the loss reads the
    reference only through the equilibrium (translation, shape).
    """
    loss, dL_dq = task_loss(system, layout, q, task)
    dX = None
    if task.kind == "rotation":
        dX = rotation_reference_term(system, layout, q, task.descriptor)
    return loss, dL_dq, dX


def task_descriptor_input(layout, task):
    """Network input for a task: normalized offsets for translation,
    the raw angle for rotation, flattened outline points for shape."""
    if task.kind == "translation":
        w = layout.cell_width
        center = np.array([0.5 * layout.cols * w, 0.5 * layout.rows * w])
        return (task.descriptor - center) / (0.6 * w)
    return task.descriptor
