"""Digital MNIST display: IDX data, slit readout, and training stages.

A digit image selects actuations, the material deforms, and a color
field painted on the material is viewed through 7 fixed slits arranged
as a seven-segment display.  The readout at each slit samples 9 fixed
lab-frame points: each point is pulled back through the deformed patch
mapping to its material coordinates, where the color field (one global
5x5 spline over the domain bounding square) is evaluated.  Points that
no deformed patch covers (a pore opened under the slit) read 0.

Gradients of the readout flow three ways: directly to the 25 color
values, to the deformed control points through the implicit function
theorem of the inverse mapping, and to the reference control points
through the color evaluation at the pulled-back material position (the
explicit reference term consumed by the adjoint).

Training happens in stages: (1) a lookup table of per-digit actuations
plus the color field are optimized with adjoint gradients; (2) a
classifier network is distilled to map digit images to the table
actuations; (3) optional end-to-end finetuning at a small rate.
"""

import hashlib
import struct

import numpy as np
from dataclasses import dataclass

from .adjoint import actuation_gradient, adjoint_state
from .geometry import color_basis, color_basis_grad
from .neural import MlpSpec, OptimState, backward, forward, init_weights, sgd_step
from .solver import NonconvergenceError, newton_solve
from .splines import BasisSpec, ControlNet, basis_eval_all, invert_map, patch_jacobian

_BSPEC = BasisSpec()

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------------------
# IDX container IO

def write_idx_images(path, images):
    """Write uint8 images (N, 28, 28) in IDX3 format."""
    arr = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGES_MAGIC, n, h, w))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels):
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", LABELS_MAGIC, arr.size))
        fh.write(arr.tobytes())


def _read_exact(fh, count, offset, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise ValueError("truncated %s at byte %d: wanted %d, got %d"
                         % (what, offset, count, len(buf)))
    return buf


def load_mnist(path_images, path_labels):
    """Parse IDX image/label files; pixels scaled to [0, 1]."""
    with open(path_images, "rb") as fh:
        magic, n, h, w = struct.unpack(">iiii", _read_exact(fh, 16, 0, "header"))
        if magic != IMAGES_MAGIC:
            raise ValueError("bad image magic 0x%08x at byte 0" % magic)
        raw = _read_exact(fh, n * h * w, 16, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w) / 255.0
    with open(path_labels, "rb") as fh:
        magic, m = struct.unpack(">ii", _read_exact(fh, 8, 0, "header"))
        if magic != LABELS_MAGIC:
            raise ValueError("bad label magic 0x%08x at byte 0" % magic)
        labels = np.frombuffer(_read_exact(fh, m, 8, "label data"),
                               dtype=np.uint8).astype(int)
    if labels.size != n:
        raise ValueError("image/label count mismatch: %d vs %d" % (n, labels.size))
    return images, labels


# ---------------------------------------------------------------------------
# deterministic synthetic digit fixture (5x7 glyphs, jittered and noised)

_GLYPH_ROWS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00110", "01000", "10000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph(digit):
    rows = _GLYPH_ROWS[digit]
    return np.array([[c == "1" for c in row] for row in rows], dtype=float)


def make_fixture_dataset(dir_path, n_per_class=60, seed=0, prefix="train"):
    """Write a deterministic synthetic IDX digit set; returns the paths."""
    import os

    rng = np.random.default_rng(seed)
    images, labels = [], []
    for digit in range(10):
        glyph = np.kron(_glyph(digit), np.ones((3, 3)))  # 21 x 15
        for _ in range(n_per_class):
            canvas = np.zeros((28, 28))
            oy = rng.integers(1, 6)
            ox = rng.integers(2, 11)
            canvas[oy:oy + 21, ox:ox + 15] = glyph * rng.uniform(0.75, 1.0)
            canvas += rng.normal(0.0, 0.05, size=canvas.shape)
            images.append(np.clip(canvas, 0.0, 1.0) * 255.0)
            labels.append(digit)
    order = rng.permutation(len(images))
    images = np.rint(np.array(images)[order]).astype(np.uint8)
    labels = np.array(labels, dtype=np.uint8)[order]
    img_path = os.path.join(dir_path, "%s-images-idx3-ubyte" % prefix)
    lbl_path = os.path.join(dir_path, "%s-labels-idx1-ubyte" % prefix)
    write_idx_images(img_path, images)
    write_idx_labels(lbl_path, labels)
    return img_path, lbl_path


def first_image_digest(path_images):
    """Hex sha256 of the first image's raw bytes (fixture pin)."""
    with open(path_images, "rb") as fh:
        _, _, h, w = struct.unpack(">iiii", fh.read(16))
        return hashlib.sha256(fh.read(h * w)).hexdigest()


# ---------------------------------------------------------------------------
# seven-segment display

# segment order: A top, B top-right, C bottom-right, D bottom,
# E bottom-left, F top-left, G middle
SEGMENT_TABLE = np.array([
    [1, 1, 1, 1, 1, 1, 0],  # 0
    [0, 1, 1, 0, 0, 0, 0],  # 1
    [1, 1, 0, 1, 1, 0, 1],  # 2
    [1, 1, 1, 1, 0, 0, 1],  # 3
    [0, 1, 1, 0, 0, 1, 1],  # 4
    [1, 0, 1, 1, 0, 1, 1],  # 5
    [1, 0, 1, 1, 1, 1, 1],  # 6
    [1, 1, 1, 0, 0, 0, 0],  # 7
    [1, 1, 1, 1, 1, 1, 1],  # 8
    [1, 1, 1, 1, 0, 1, 1],  # 9
], dtype=float)


def segment_targets(label):
    """Seven-segment target vector for a digit label."""
    if not 0 <= int(label) <= 9:
        raise ValueError("label must be a digit")
    return SEGMENT_TABLE[int(label)].copy()


@dataclass
class SevenSegmentSpec:
    """Slit centerlines in the lab frame with fixed sample points."""

    endpoints: np.ndarray  # (7, 2, 2) centerline endpoints
    points: np.ndarray     # (7, s, 2) fixed sample points
    half_width: float      # slit half thickness, for rendering

    def __post_init__(self):
        n = len(self.endpoints)
        lo = self.endpoints.min(axis=1) - self.half_width
        hi = self.endpoints.max(axis=1) + self.half_width
        for i in range(n):
            for j in range(i + 1, n):
                if np.all(lo[i] <= hi[j]) and np.all(lo[j] <= hi[i]):
                    raise ValueError("slits %d and %d overlap" % (i, j))


def make_segment_spec(layout, n_samples=9, frac=0.6, half_width=0.04):
    """Seven slits on interior lattice lines of the layout.

    The digit occupies a 1 x 2 cell box centered horizontally, one cell
    above the bottom; horizontal slits run along horizontal lattice
    lines and vertical slits along vertical ones, where the material
    webbing between pores is thickest.  Requires at least 3 x 3 cells.
    """
    if layout.rows < 3 or layout.cols < 3:
        raise ValueError("need at least 3x3 cells for the display")
    w = layout.cell_width
    cx = (layout.cols - 1) // 2  # column of the digit box
    x0, x1 = cx * w, (cx + 1) * w
    y0, y1, y2 = w, 2 * w, 3 * w
    mid = 0.5 * (x0 + x1)
    half = 0.5 * frac * w

    def hseg(y):
        return [[mid - half, y], [mid + half, y]]

    def vseg(x, ylo):
        c = ylo + 0.5 * w
        return [[x, c - half], [x, c + half]]

    endpoints = np.array([
        hseg(y2),        # A
        vseg(x1, y1),    # B
        vseg(x1, y0),    # C
        hseg(y0),        # D
        vseg(x0, y0),    # E
        vseg(x0, y1),    # F
        hseg(y1),        # G
    ])
    ts = np.linspace(0.0, 1.0, n_samples)[:, None]
    points = endpoints[:, 0][:, None, :] * (1 - ts) + endpoints[:, 1][:, None, :] * ts
    return SevenSegmentSpec(endpoints, points, half_width)


# ---------------------------------------------------------------------------
# slit readout through the deformed material

def _locate(pt, defc, order, guesses):
    """Containing patch and parent coords of a lab point, or (-1, None)."""
    for p in order:
        guess = guesses.get(p, (0.5, 0.5))
        net = ControlNet(defc[p].reshape(5, 5, 2))
        u = invert_map(net, pt, guess=guess)
        if u is None:
            continue
        if -1e-9 <= u[0] <= 1 + 1e-9 and -1e-9 <= u[1] <= 1 + 1e-9:
            return p, np.clip(u, 0.0, 1.0)
    return -1, None


def build_readout_table(system, seg_spec):
    """Reference containing patch and parent coords per slit point."""
    defc = system.X_local
    cents = defc.mean(axis=1)
    n_seg, n_pts = seg_spec.points.shape[:2]
    patch = np.full((n_seg, n_pts), -1, dtype=int)
    coords = np.zeros((n_seg, n_pts, 2))
    for s in range(n_seg):
        for j in range(n_pts):
            pt = seg_spec.points[s, j]
            order = np.argsort(np.linalg.norm(cents - pt, axis=1))
            p, u = _locate(pt, defc, order, {})
            patch[s, j] = p
            if p >= 0:
                coords[s, j] = u
    return patch, coords


def slit_readout(system, layout, q, color, seg_spec, table=None,
                 want_grads=False):
    """Average color seen through each slit, optionally with gradients.

    Returns readout (7,) or, when want_grads, a tuple
    (readout, d_color (7, 25), dq_local (7, P, 25, 2) summed per slit,
    dX_local likewise) -- the per-slit derivative stacks let callers
    apply any outer loss weighting.
    """
    defc = system.local_deformed(q)
    cents = defc.mean(axis=1)
    if table is None:
        table = build_readout_table(system, seg_spec)
    warm_patch, warm_coords = table
    n_seg, n_pts = seg_spec.points.shape[:2]
    cvec = np.asarray(color, dtype=float).ravel()
    readout = np.zeros(n_seg)
    if want_grads:
        d_color = np.zeros((n_seg, 25))
        dq = np.zeros((n_seg,) + system.X_local.shape)
        dX = np.zeros_like(dq)
    for s in range(n_seg):
        for j in range(n_pts):
            pt = seg_spec.points[s, j]
            order = np.argsort(np.linalg.norm(cents - pt, axis=1))[:12]
            wp = warm_patch[s, j]
            guesses = {}
            if wp >= 0:
                order = np.concatenate([[wp], order[order != wp]])
                guesses[wp] = warm_coords[s, j]
            p, u = _locate(pt, defc, order, guesses)
            if p < 0:
                continue  # pore under the slit: reads background 0
            bu = basis_eval_all(_BSPEC, u[0])
            bv = basis_eval_all(_BSPEC, u[1])
            brow = np.outer(bu, bv).ravel()  # (25,) local index i*5+j
            X_pt = brow @ system.X_local[p]
            crow = color_basis(layout, X_pt)[0]
            readout[s] += crow @ cvec / n_pts
            if not want_grads:
                continue
            d_color[s] += crow / n_pts
            grad_c = color_basis_grad(layout, X_pt)[0].T @ cvec  # (2,)
            ref_net = ControlNet(system.X_local[p].reshape(5, 5, 2))
            def_net = ControlNet(defc[p].reshape(5, 5, 2))
            J_ref = patch_jacobian(ref_net, u[0], u[1])
            J_def = patch_jacobian(def_net, u[0], u[1])
            g_param = J_ref.T @ grad_c
            v = np.linalg.solve(J_def.T, g_param)
            dq[s, p] += np.outer(brow, -v) / n_pts
            dX[s, p] += np.outer(brow, grad_c) / n_pts
    if want_grads:
        return readout, d_color, dq, dX
    return readout


def mnist_loss(system, layout, q, color, targets, seg_spec, table=None,
               want_grads=True):
    """Mean squared segment error and its gradients.

    Returns (loss, dL_dq (G, 2), dL_dcolor (5, 5), dL_dX (P, 25, 2));
    with want_grads=False just the scalar.
    """
    t = np.asarray(targets, dtype=float)
    if not want_grads:
        r = slit_readout(system, layout, q, color, seg_spec, table)
        return float(np.mean((r - t) ** 2))
    r, d_color, dq, dX = slit_readout(system, layout, q, color, seg_spec,
                                      table, want_grads=True)
    err = r - t
    loss = float(np.mean(err ** 2))
    upstream = 2.0 * err / err.size
    dL_dcolor = (upstream @ d_color).reshape(5, 5)
    dq_local = np.einsum("s,spab->pab", upstream, dq)
    dX_local = np.einsum("s,spab->pab", upstream, dX)
    dL_dq = system.dofmap.scatter_add(dq_local)
    return loss, dL_dq, dL_dcolor, dX_local


# ---------------------------------------------------------------------------
# stage 1: lookup-table pretraining (color + per-digit actuations)

def mnist_pretrain_lookup(system, layout, seg_spec, *, steps=400, lr=0.2,
                          lr_color=None, a_max=None, seed=0, settings=None,
                          color0=None, table0=None, log=None):
    """Jointly optimize the color field and a 10 x k actuation table.

    Gradients come from the adjoint solve; geometry (radii, corners)
    stays fixed, so one PatchSystem and one readout table are reused
    and each digit's equilibrium warm-starts its next solve.  Returns
    (color, table, loss_history).
    """
    k = layout.num_channels
    if a_max is None:
        a_max = 0.6 * layout.cell_width
    if lr_color is None:
        lr_color = lr
    rng = np.random.default_rng(seed)
    color = np.full((5, 5), 0.5) if color0 is None else color0.copy()
    table = (0.05 * a_max * rng.standard_normal((10, k))
             if table0 is None else table0.copy())
    read_table = build_readout_table(system, seg_spec)
    warm = [None] * 10
    history = []
    for step in range(steps):
        total = 0.0
        g_color = np.zeros((5, 5))
        g_table = np.zeros((10, k))
        for digit in range(10):
            try:
                res = newton_solve(system, table[digit], settings,
                                   q_init=warm[digit])
            except NonconvergenceError:
                warm[digit] = None
                continue
            warm[digit] = res.q
            loss, dL_dq, dL_dcolor, _ = mnist_loss(
                system, layout, res.q, color, segment_targets(digit),
                seg_spec, read_table)
            lam, H, g = adjoint_state(system, res.q, dL_dq)
            g_table[digit] = actuation_gradient(system, H, g, lam)
            g_color += dL_dcolor
            total += loss
        color = np.clip(color - lr_color * g_color, 0.0, 1.0)
        table = np.clip(table - lr * g_table, -0.98 * a_max, 0.98 * a_max)
        history.append(total / 10.0)
        if log is not None:
            log.write('{"step": %d, "loss": %.10e}\n' % (step, history[-1]))
    return color, table, history


# ---------------------------------------------------------------------------
# stage 2: distill a classifier net onto the lookup table

def mnist_distill(images, labels, table, a_max, *, steps=3000, lr=0.05,
                  batch=32, seed=0, sizes=(784, 128, 64, 6)):
    """Train a network to map digit images to their table actuations."""
    spec = MlpSpec(tuple(sizes), out_scale=a_max)
    theta = init_weights(spec, seed)
    rng = np.random.default_rng(seed + 1)
    X = images.reshape(images.shape[0], -1)
    Y = table[labels]
    n = X.shape[0]
    state = OptimState(lr=lr)
    history = []
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch, n), replace=False)
        out, cache = forward(spec, theta, X[idx])
        err = out - Y[idx]
        grads, _ = backward(spec, theta, cache, 2.0 * err / idx.size)
        sgd_step(theta, grads, state)
        history.append(float(np.mean(err ** 2)))
    return spec, theta, history


def distill_match_fraction(spec, theta, images, labels, table, a_max,
                           tol=0.05):
    """Fraction of digits whose predicted actuations all fall within
    tol x a_max of their class table entry."""
    out, _ = forward(spec, theta, images.reshape(images.shape[0], -1))
    err = np.abs(out - table[labels]).max(axis=1)
    return float(np.mean(err <= tol * a_max))


# ---------------------------------------------------------------------------
# stage 3: end-to-end finetuning

def mnist_finetune(system, layout, seg_spec, spec, theta, color, images,
                   labels, *, steps=50, lr=1e-4, batch=4, seed=0,
                   settings=None, log=None):
    """Finetune classifier and color jointly through the simulator."""
    rng = np.random.default_rng(seed)
    read_table = build_readout_table(system, seg_spec)
    state = OptimState(lr=lr)
    X = images.reshape(images.shape[0], -1)
    history = []
    for _ in range(steps):
        idx = rng.choice(X.shape[0], size=batch, replace=False)
        total = 0.0
        g_theta = None
        g_color = np.zeros((5, 5))
        for i in idx:
            a, cache = forward(spec, theta, X[i])
            try:
                res = newton_solve(system, a, settings)
            except NonconvergenceError:
                continue
            loss, dL_dq, dL_dcolor, _ = mnist_loss(
                system, layout, res.q, color, segment_targets(labels[i]),
                seg_spec, read_table)
            lam, H, g = adjoint_state(system, res.q, dL_dq)
            dL_da = actuation_gradient(system, H, g, lam)
            grads, _ = backward(spec, theta, cache, dL_da)
            if g_theta is None:
                g_theta = [[dW.copy(), db.copy()] for dW, db in grads]
            else:
                for acc, (dW, db) in zip(g_theta, grads):
                    acc[0] += dW
                    acc[1] += db
            g_color += dL_dcolor
            total += loss
        if g_theta is not None:
            sgd_step(theta, g_theta, state)
        color = np.clip(color - lr * g_color, 0.0, 1.0)
        history.append(total / max(len(idx), 1))
        if log is not None:
            log.write('{"loss": %.10e}\n' % history[-1])
    return theta, color, history
