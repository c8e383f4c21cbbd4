"""Deterministic SVG renderings of deformed cellular geometries.

Each patch contributes one closed outline path sampled at 32 points per
edge; a color field adds per-knot-span quad shading underneath, and task
annotations (pointer, targets, stick, slits, outlines) draw on top.
Output bytes depend only on the inputs.
"""

import numpy as np

from ..geometry import color_eval
from ..splines import BasisSpec, basis_eval_all

_SPEC = BasisSpec()
_EDGE_T = np.linspace(0.0, 1.0, 32)
_SPAN_EDGES = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])


def _fmt(x):
    return "%.3f" % x


def _points(coords, u, v):
    """Evaluate the patch map at paired parameter arrays."""
    bu = basis_eval_all(_SPEC, np.asarray(u, dtype=float))
    bv = basis_eval_all(_SPEC, np.asarray(v, dtype=float))
    return np.einsum("ni,nj,ijk->nk", bu, bv, coords)


def _outline(coords, t=_EDGE_T):
    ones = np.ones_like(t)
    return np.concatenate([
        _points(coords, t, 0.0 * ones),       # bottom, xi increasing
        _points(coords, ones, t),             # right, eta increasing
        _points(coords, t[::-1], ones),       # top, xi decreasing
        _points(coords, 0.0 * ones, t[::-1]),  # left, eta decreasing
    ])


def _path(pts, to_screen, cls, style=""):
    xy = to_screen(pts)
    d = "M %s %s " % (_fmt(xy[0, 0]), _fmt(xy[0, 1]))
    d += " ".join("L %s %s" % (_fmt(p[0]), _fmt(p[1])) for p in xy[1:])
    d += " Z"
    return '<path class="%s" d="%s"%s/>' % (cls, d, style)


def _line(a, b, to_screen, cls, width):
    (x0, y0), (x1, y1) = to_screen(np.array([a, b]))
    return ('<line class="%s" x1="%s" y1="%s" x2="%s" y2="%s" '
            'stroke-width="%s"/>' % (cls, _fmt(x0), _fmt(y0), _fmt(x1),
                                     _fmt(y1), _fmt(width)))


def _circle(c, r, to_screen, cls, extra=""):
    (x, y), = to_screen(np.array([c]))
    return '<circle class="%s" cx="%s" cy="%s" r="%s"%s/>' % (
        cls, _fmt(x), _fmt(y), _fmt(r), extra)


def render_svg(system, layout, q=None, color=None, annotations=None,
               scale=120.0):
    """SVG document string for a (possibly deformed) configuration.

    q is the global (G, 2) position vector; None renders the reference.
    color is an optional (5, 5) global field shaded per knot span.
    annotations maps marker names (pointer, target, stick, target_stick,
    slits, outline, target_outline) to world coordinates.
    """
    if q is None:
        q = system.X_global
    local = system.dofmap.gather(q)
    ref_local = system.X_local
    lo = local.reshape(-1, 2).min(axis=0)
    hi = local.reshape(-1, 2).max(axis=0)
    pad = 0.08 * max(hi[0] - lo[0], hi[1] - lo[1]) + 1e-9
    width = scale * (hi[0] - lo[0] + 2 * pad)
    height = scale * (hi[1] - lo[1] + 2 * pad)

    def to_screen(pts):
        pts = np.asarray(pts, dtype=float)
        out = np.empty_like(pts)
        out[:, 0] = scale * (pts[:, 0] - lo[0] + pad)
        out[:, 1] = scale * (hi[1] + pad - pts[:, 1])
        return out

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" width="%s" height="%s" '
        'viewBox="0 0 %s %s">' % (_fmt(width), _fmt(height), _fmt(width),
                                  _fmt(height)),
        '<rect x="0" y="0" width="%s" height="%s" fill="white"/>' % (
            _fmt(width), _fmt(height)),
        '<g stroke="none">',
    ]

    edge8 = np.linspace(0.0, 1.0, 8)
    if color is not None:
        for p in range(system.n_patches):
            coords = local[p].reshape(5, 5, 2)
            ref = ref_local[p].reshape(5, 5, 2)
            for iu in range(3):
                for iv in range(3):
                    a, b = _SPAN_EDGES[iu], _SPAN_EDGES[iu + 1]
                    c, d = _SPAN_EDGES[iv], _SPAN_EDGES[iv + 1]
                    u = a + (b - a) * edge8
                    v = c + (d - c) * edge8
                    quad = np.concatenate([
                        _points(coords, u, np.full(8, c)),
                        _points(coords, np.full(8, b), v),
                        _points(coords, u[::-1], np.full(8, d)),
                        _points(coords, np.full(8, a), v[::-1]),
                    ])
                    mid = _points(ref, [(a + b) / 2], [(c + d) / 2])
                    val = float(np.clip(
                        color_eval(layout, color, mid)[0], 0.0, 1.0))
                    gray = int(round(255 * (1.0 - 0.85 * val)))
                    fill = ' fill="rgb(%d,%d,%d)"' % (gray, gray, gray)
                    parts.append(_path(quad, to_screen, "span-fill", fill))
    parts.append("</g>")

    parts.append('<g fill="none" stroke="black" stroke-width="1.2">')
    for p in range(system.n_patches):
        coords = local[p].reshape(5, 5, 2)
        parts.append(_path(_outline(coords), to_screen, "patch-outline"))
    parts.append("</g>")

    ann = annotations or {}
    parts.append('<g stroke="crimson" fill="crimson">')
    if "stick" in ann:
        a, b = np.asarray(ann["stick"])
        parts.append(_line(a, b, to_screen, "marker-stick", 4.0))
    if "target_stick" in ann:
        a, b = np.asarray(ann["target_stick"])
        parts.append('<g stroke-dasharray="6,4" stroke="royalblue">')
        parts.append(_line(a, b, to_screen, "marker-target-stick", 3.0))
        parts.append("</g>")
    for seg in np.asarray(ann["slits"]) if "slits" in ann else []:
        parts.append(_line(seg[0], seg[1], to_screen, "marker-slit", 2.0))
    if "outline" in ann:
        parts.append(_path(np.asarray(ann["outline"]), to_screen,
                           "marker-outline", ' fill="none"'))
    if "target_outline" in ann:
        parts.append('<g stroke="royalblue">')
        parts.append(_path(np.asarray(ann["target_outline"]), to_screen,
                           "marker-target-outline", ' fill="none"'))
        parts.append("</g>")
    if "pointer" in ann:
        parts.append(_circle(ann["pointer"], 0.035 * scale, to_screen,
                             "marker-pointer"))
    if "target" in ann:
        parts.append(_circle(ann["target"], 0.035 * scale, to_screen,
                             "marker-target",
                             ' fill="none" stroke="royalblue"'))
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
