"""Differentiable cell geometry: design parameters to patch control nets.

A rows x cols grid of square cells, each carved into 4 quadratic B-spline
patches forming a ring around one pore.  The design vector holds one radius
per pore-boundary ray (16 per cell), a 2D offset per interior cell corner,
and optionally a 5x5 grid of color control values painted over the domain.
Everything downstream (pore points, lateral edges, Coons interiors) is
bilinear in (radii, corner offsets), so the exact Jacobian of control
coordinates with respect to the parameters is assembled by evaluating the
map on unit parameter perturbations.

Outer-boundary control points never move with the parameters; Dirichlet
actuation is prescribed there through the DOF map's constraint matrix.
"""

import numpy as np
from dataclasses import dataclass, field
from scipy import sparse
from scipy.spatial import cKDTree

from .splines import (
    BasisSpec,
    ControlNet,
    basis_deriv_all,
    basis_eval_all,
    greville_abscissae,
)

_SPEC = BasisSpec()
_GREV = greville_abscissae(_SPEC)

SIDES = ("bottom", "right", "top", "left")


@dataclass(frozen=True)
class ActuationSpec:
    """One Dirichlet actuation region: a run of cells along one outer side.

    span is a half-open cell-index range along that side (column indices
    for bottom/top, row indices for left/right); None covers the full side.
    All edge control points of the covered patches are prescribed the
    displacement a[channel] * direction.
    """

    side: str
    channel: int
    direction: tuple
    span: tuple = None

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError("unknown side %r" % (self.side,))


@dataclass(frozen=True)
class CellLayout:
    rows: int
    cols: int
    cell_width: float = 1.0
    actuations: tuple = ()
    fixed: tuple = ()  # (side, span) pairs pinned to zero displacement
    num_channels: int = 0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.cell_width <= 0:
            raise ValueError("bad layout dimensions")
        for act in self.actuations:
            if not 0 <= act.channel < self.num_channels:
                raise ValueError("actuation channel out of range")

    @property
    def n_cells(self):
        return self.rows * self.cols

    @property
    def center_cell(self):
        return (self.rows // 2) * self.cols + self.cols // 2

    @property
    def corner_box_halfwidth(self):
        # interior cell corners may wander inside a box of this half-width
        return 0.2 * self.cell_width

    def interior_corners(self):
        """(row, col) lattice indices of movable interior corners."""
        return [(r, c) for r in range(1, self.rows) for c in range(1, self.cols)]


@dataclass
class GeometryParams:
    radii: np.ndarray  # (n_cells, 16)
    corners: np.ndarray  # (n_interior, 2) offsets
    color: np.ndarray = None  # (5, 5) control values in [0, 1]

    def copy(self):
        return GeometryParams(
            self.radii.copy(),
            self.corners.copy(),
            None if self.color is None else self.color.copy(),
        )

    def flat(self):
        parts = [self.radii.ravel(), self.corners.ravel()]
        if self.color is not None:
            parts.append(self.color.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


def default_params(layout, radius=0.5, with_color=False):
    n_int = (layout.rows - 1) * (layout.cols - 1)
    color = np.zeros((5, 5)) if with_color else None
    return GeometryParams(
        radii=np.full((layout.n_cells, 16), radius),
        corners=np.zeros((n_int, 2)),
        color=color,
    )


def project_params(layout, params):
    """Clip radii to [0.1, 0.9] and corner offsets to their boxes, in place."""
    np.clip(params.radii, 0.1, 0.9, out=params.radii)
    hw = layout.corner_box_halfwidth
    np.clip(params.corners, -hw, hw, out=params.corners)
    if params.color is not None:
        np.clip(params.color, 0.0, 1.0, out=params.color)
    return params


def corner_positions(layout, params):
    """(rows+1, cols+1, 2) lattice of cell corners with offsets applied."""
    w = layout.cell_width
    ys, xs = np.meshgrid(
        np.arange(layout.rows + 1) * w, np.arange(layout.cols + 1) * w, indexing="ij"
    )
    pos = np.stack([xs, ys], axis=-1)
    for idx, (r, c) in enumerate(layout.interior_corners()):
        pos[r, c] += params.corners[idx]
    return pos


def _cell_nets(radii, quad_corners):
    """Control nets (4, 5, 5, 2) of one cell from its 16 radii and 4 corners.

    quad_corners is ordered SW, SE, NE, NW (counter-clockwise).  Boundary
    points sit at Greville fractions along each side, pore points at
    centroid + r * (boundary - centroid) along the 16 rays, lateral patch
    edges at Greville fractions along each corner ray, and patch interiors
    by discrete Coons interpolation.  The construction reuses shared arrays
    so coincident control points of neighboring patches are identical.
    """
    g = _GREV
    q = quad_corners
    b = np.empty((16, 2))
    for s in range(4):
        q0, q1 = q[s], q[(s + 1) % 4]
        for t in range(4):
            b[4 * s + t] = (1.0 - g[t]) * q0 + g[t] * q1
    centroid = 0.25 * (q[0] + q[1] + q[2] + q[3])
    pore = centroid + radii[:, None] * (b - centroid)

    # eta runs from the cell side (eta=0) inward to the pore arc (eta=1),
    # xi counter-clockwise along the side; this orientation keeps det > 0
    nets = np.empty((4, 5, 5, 2))
    for k in range(4):
        idx = [(4 * k + t) % 16 for t in range(5)]
        net = nets[k]
        net[:, 0] = b[idx]
        net[:, 4] = pore[idx]
        for j in range(1, 4):
            net[0, j] = (1.0 - g[j]) * net[0, 0] + g[j] * net[0, 4]
            net[4, j] = (1.0 - g[j]) * net[4, 0] + g[j] * net[4, 4]
        for i in range(1, 4):
            for j in range(1, 4):
                gi, gj = g[i], g[j]
                net[i, j] = (
                    (1.0 - gi) * net[0, j]
                    + gi * net[4, j]
                    + (1.0 - gj) * net[i, 0]
                    + gj * net[i, 4]
                    - (1.0 - gi) * (1.0 - gj) * net[0, 0]
                    - gi * (1.0 - gj) * net[4, 0]
                    - (1.0 - gi) * gj * net[0, 4]
                    - gi * gj * net[4, 4]
                )
    return nets


def _cell_quad_corners(pos, r, c):
    # SW, SE, NE, NW of cell (r, c) from the lattice
    return np.array([pos[r, c], pos[r, c + 1], pos[r + 1, c + 1], pos[r + 1, c]])


def build_reference(layout, params):
    """Reference control nets, 4 per cell, cell-major then patch 0..3.

    Patch k of a cell spans the ring sector between cell side k (eta=0)
    and the pore arc (eta=1), sides ordered bottom, right, top, left.
    """
    if params.radii.shape != (layout.n_cells, 16):
        raise ValueError("radii shape mismatch")
    n_int = (layout.rows - 1) * (layout.cols - 1)
    if params.corners.shape != (n_int, 2):
        raise ValueError("corners shape mismatch")
    pos = corner_positions(layout, params)
    nets = []
    for r in range(layout.rows):
        for c in range(layout.cols):
            cell = r * layout.cols + c
            quad = _cell_quad_corners(pos, r, c)
            for net in _cell_nets(params.radii[cell], quad):
                nets.append(ControlNet(net))
    return nets


def reference_jacobian(layout, params):
    """Exact d(flattened control coords)/d(radii, corners) as CSR.

    Rows index patch-major flattened coordinates (patch, i, j, component);
    columns index [all radii, then corner offsets].  The map is bilinear,
    so columns are differences of the construction evaluated at unit
    parameter perturbations.
    """
    pos = corner_positions(layout, params)
    n_rad = layout.n_cells * 16
    n_cor = params.corners.size
    interior = {rc: i for i, rc in enumerate(layout.interior_corners())}
    rows_out, cols_out, vals = [], [], []
    for r in range(layout.rows):
        for c in range(layout.cols):
            cell = r * layout.cols + c
            quad = _cell_quad_corners(pos, r, c)
            base = _cell_nets(params.radii[cell], quad)
            row0 = cell * 4 * 50  # 4 patches x 50 coords per cell
            zero_r = _cell_nets(np.zeros(16), quad)
            for m in range(16):
                e = np.zeros(16)
                e[m] = 1.0
                col_vals = (_cell_nets(e, quad) - zero_r).ravel()
                nz = np.nonzero(col_vals)[0]
                rows_out.append(row0 + nz)
                cols_out.append(np.full(nz.size, cell * 16 + m))
                vals.append(col_vals[nz])
            # corner offsets: lattice corners of this cell, CCW order
            lattice = [(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)]
            for s, rc in enumerate(lattice):
                if rc not in interior:
                    continue
                for d in range(2):
                    dq = quad.copy()
                    dq[s, d] += 1.0
                    col_vals = (_cell_nets(params.radii[cell], dq) - base).ravel()
                    nz = np.nonzero(col_vals)[0]
                    rows_out.append(row0 + nz)
                    cols_out.append(np.full(nz.size, n_rad + 2 * interior[rc] + d))
                    vals.append(col_vals[nz])
    n_coords = layout.n_cells * 4 * 50
    jac = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(n_coords, n_rad + n_cor),
    )
    return jac.tocsr()


class DofMap:
    """Constraint groups over patch control points plus the Dirichlet sets.

    Coincident control points (across patch edges) form groups; the global
    vector has one 2D value per group.  Entries (2*group + component) are
    partitioned into free and constrained; constrained entries carry a row
    of the actuation matrix C so their prescribed displacement is C @ a.
    """

    def __init__(self, group_id, n_groups, rep_flat, constrained, C, num_channels):
        self.group_id = group_id  # (P, 25) int
        self.n_groups = n_groups
        self.rep_flat = rep_flat  # (G,) flat point index of representative
        self.constrained = constrained  # (n_c,) sorted entry ids, entry = 2g+d
        self.C = C  # (n_c, k) actuation matrix
        self.num_channels = num_channels
        mask = np.ones(2 * n_groups, dtype=bool)
        mask[constrained] = False
        self.free = np.nonzero(mask)[0]
        self.free_mask = mask

    @property
    def n_entries(self):
        return 2 * self.n_groups

    def gather(self, global_vals):
        """Global (G, 2) values to per-patch local (P, 25, 2)."""
        return global_vals[self.group_id]

    def scatter_add(self, local_vals):
        """Sum per-patch local (P, 25, 2) contributions into (G, 2)."""
        out = np.zeros((self.n_groups, 2))
        np.add.at(out, self.group_id.ravel(), local_vals.reshape(-1, 2))
        return out

    def scatter_pick(self, local_vals):
        """Representative slot of each group from local (P, 25, 2) values."""
        flat = local_vals.reshape(-1, 2)
        return flat[self.rep_flat].copy()

    def global_reference(self, nets):
        coords = np.stack([net.coords.reshape(25, 2) for net in nets])
        return self.scatter_pick(coords)


def _boundary_patch_cells(layout, side, span):
    """Cell indices whose patch on the given side lies on the outer boundary."""
    lo, hi = span if span is not None else (0, None)
    if side == "bottom":
        rng = range(layout.cols)[lo:hi]
        return [c for c in rng]
    if side == "top":
        rng = range(layout.cols)[lo:hi]
        return [(layout.rows - 1) * layout.cols + c for c in rng]
    if side == "left":
        rng = range(layout.rows)[lo:hi]
        return [r * layout.cols for r in rng]
    rng = range(layout.rows)[lo:hi]
    return [r * layout.cols + (layout.cols - 1) for r in rng]


def build_dof_map(nets, layout=None):
    """Merge coincident control points into groups and tag constraints.

    Grouping is geometric (pair radius 1e-9 with members verified within
    1e-12 of their representative), which also certifies that the patch
    edges conform.  Group ids are ordered by first appearance so the
    numbering is deterministic and independent of parameter values.
    """
    P = len(nets)
    pts = np.stack([net.coords.reshape(25, 2) for net in nets]).reshape(-1, 2)
    parent = np.arange(P * 25)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    tree = cKDTree(pts)
    for i, j in sorted(tree.query_pairs(1e-9)):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(P * 25)])
    order = {}
    gid = np.empty(P * 25, dtype=np.int64)
    rep = []
    for i, root in enumerate(roots):
        if root not in order:
            order[root] = len(rep)
            rep.append(root)
        gid[i] = order[root]
    n_groups = len(rep)
    rep_flat = np.array(rep)
    if np.max(np.linalg.norm(pts - pts[rep_flat][gid], axis=1)) > 1e-12:
        raise RuntimeError("non-conforming patch edges")
    group_id = gid.reshape(P, 25)

    num_channels = layout.num_channels if layout is not None else 0
    entry_coeffs = {}
    if layout is not None:
        side_index = {s: k for k, s in enumerate(SIDES)}
        fixed_entries = set()
        for side, span in layout.fixed:
            for cell in _boundary_patch_cells(layout, side, span):
                patch = 4 * cell + side_index[side]
                for i in range(5):
                    g = group_id[patch, i * 5]
                    fixed_entries.update((2 * g, 2 * g + 1))
        # first assignment wins: a point on two actuated regions (a shared
        # corner) keeps the earlier region's prescription, which keeps the
        # actuated and fixed sets disjoint and the assignment deterministic
        for act in layout.actuations:
            k = side_index[act.side]
            for cell in _boundary_patch_cells(layout, act.side, act.span):
                patch = 4 * cell + k
                for i in range(5):
                    g = group_id[patch, i * 5]  # eta=0 edge, local (i, 0)
                    if 2 * g in fixed_entries or 2 * g in entry_coeffs:
                        continue
                    for d in range(2):
                        entry_coeffs[2 * g + d] = {act.channel: act.direction[d]}
        for entry in fixed_entries:
            entry_coeffs.setdefault(entry, {})
    constrained = np.array(sorted(entry_coeffs), dtype=np.int64)
    C = np.zeros((constrained.size, num_channels))
    for row, entry in enumerate(constrained):
        for ch, coeff in entry_coeffs[entry].items():
            C[row, ch] = coeff
    return DofMap(group_id, n_groups, rep_flat, constrained, C, num_channels)


def pore_groups(dofmap, cell):
    """Group ids of a cell's 16 pore-boundary points in ray order.

    Ray m sits on patch m // 4 at local (m % 4, eta=1); ray order runs
    counter-clockwise starting at the SW corner ray.
    """
    out = np.empty(16, dtype=np.int64)
    for m in range(16):
        patch = 4 * cell + m // 4
        out[m] = dofmap.group_id[patch, (m % 4) * 5 + 4]
    return out


def apply_actuation(dofmap, a):
    """Prescribed displacements of the constrained entries for actuation a."""
    a = np.asarray(a, dtype=float)
    if a.shape != (dofmap.num_channels,):
        raise ValueError("actuation length mismatch")
    return dofmap.C @ a


def color_basis(layout, points):
    """Rows of d(color value)/d(color params) for lab-frame points.

    The color field is one global 5x5 quadratic patch stretched over the
    domain bounding square; values are linear in the control values.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    w, hgt = layout.cols * layout.cell_width, layout.rows * layout.cell_width
    tol = 1e-9 * max(w, hgt)
    if np.any(pts[:, 0] < -tol) or np.any(pts[:, 0] > w + tol) \
            or np.any(pts[:, 1] < -tol) or np.any(pts[:, 1] > hgt + tol):
        raise ValueError("point outside color domain")
    out = np.empty((pts.shape[0], 25))
    for row, (x, y) in enumerate(pts):
        bu = basis_eval_all(_SPEC, min(max(x / w, 0.0), 1.0))
        bv = basis_eval_all(_SPEC, min(max(y / hgt, 0.0), 1.0))
        out[row] = np.outer(bu, bv).ravel()
    return out


def color_eval(layout, color, points):
    """Color field values in [0, 1] at lab-frame points."""
    vals = color_basis(layout, points) @ np.asarray(color, dtype=float).ravel()
    return vals if np.ndim(points) > 1 else float(vals[0])


def color_basis_grad(layout, points):
    """Spatial gradient of each color basis row, shape (n, 25, 2)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    w, hgt = layout.cols * layout.cell_width, layout.rows * layout.cell_width
    out = np.empty((pts.shape[0], 25, 2))
    for row, (x, y) in enumerate(pts):
        u = min(max(x / w, 0.0), 1.0)
        v = min(max(y / hgt, 0.0), 1.0)
        bu, bv = basis_eval_all(_SPEC, u), basis_eval_all(_SPEC, v)
        du, dv = basis_deriv_all(_SPEC, u), basis_deriv_all(_SPEC, v)
        out[row, :, 0] = np.outer(du, bv).ravel() / w
        out[row, :, 1] = np.outer(bu, dv).ravel() / hgt
    return out


def _split_spans(n, parts):
    cuts = [n * p // parts for p in range(parts + 1)]
    return [(cuts[p], cuts[p + 1]) for p in range(parts)]


def make_layout(rows, cols, cell_width=1.0, preset="none"):
    """CellLayout with one of the named actuation presets.

    squeeze_lr     two channels, left pushes +x and right pushes -x
    squeeze_lr_one one channel squeezing left and right together
    squeeze_lrtb   channel 0 squeezes left/right, channel 1 top/bottom
    six_panel      left and right sides split in two (4 channels) plus
                   top and bottom (2 channels), all pushing inward
    twelve_panel   every side split in three, all pushing inward
    """
    inward = {"left": (1.0, 0.0), "right": (-1.0, 0.0),
              "bottom": (0.0, 1.0), "top": (0.0, -1.0)}
    acts = []
    if preset == "none":
        return CellLayout(rows, cols, cell_width)
    if preset == "squeeze_lr":
        acts = [ActuationSpec("left", 0, inward["left"]),
                ActuationSpec("right", 1, inward["right"])]
        k = 2
    elif preset == "squeeze_lr_one":
        acts = [ActuationSpec("left", 0, inward["left"]),
                ActuationSpec("right", 0, inward["right"])]
        k = 1
    elif preset == "squeeze_lrtb":
        acts = [ActuationSpec("left", 0, inward["left"]),
                ActuationSpec("right", 0, inward["right"]),
                ActuationSpec("top", 1, inward["top"]),
                ActuationSpec("bottom", 1, inward["bottom"])]
        k = 2
    elif preset == "six_panel":
        ch = 0
        for side in ("left", "right"):
            for span in _split_spans(rows, 2):
                acts.append(ActuationSpec(side, ch, inward[side], span))
                ch += 1
        acts.append(ActuationSpec("top", ch, inward["top"]))
        acts.append(ActuationSpec("bottom", ch + 1, inward["bottom"]))
        k = 6
    elif preset == "twelve_panel":
        ch = 0
        for side in SIDES:
            n = cols if side in ("bottom", "top") else rows
            for span in _split_spans(n, 3):
                acts.append(ActuationSpec(side, ch, inward[side], span))
                ch += 1
        k = 12
    else:
        raise ValueError("unknown preset %r" % (preset,))
    return CellLayout(rows, cols, cell_width, tuple(acts), (), k)
