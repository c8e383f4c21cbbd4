"""Pure NumPy assembly kernels, signature-compatible with the compiled ones.

Every routine accumulates into the caller-provided output array and returns
an int status: 0 on success, 1 when det F <= 0 occurred at some quadrature
point.  On a nonzero status the contents of ``out`` are unspecified; callers
discard them.  The compiled module cellmech._kernels is the fast twin and
cellmech.kernels picks one of the two at import time.
"""

import numpy as np

BACKEND = "numpy"


def _def_grads(h, defc):
    # F[q] = sum_a defc[a] outer h[q,a]; F[q,i,K]
    return np.einsum("ai,qaK->qiK", defc, h)


def reference_tables(dB, w, ref):
    """Physical basis gradients and weighted measure for one patch.

    Parameters
    ----------
    dB : (nq, n, 2) parent-domain basis gradients.
    w : (nq,) quadrature weights.
    ref : (n, 2) reference control points.

    Returns
    -------
    h : (nq, n, 2) gradients pushed to the reference configuration.
    wdet : (nq,) weight times Jacobian determinant of the reference map.
    """
    jac = np.einsum("am,qaM->qmM", ref, dB)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    if np.any(det <= 0.0):
        raise ValueError("degenerate reference mapping (det <= 0)")
    inv = np.empty_like(jac)
    inv[:, 0, 0] = jac[:, 1, 1]
    inv[:, 0, 1] = -jac[:, 0, 1]
    inv[:, 1, 0] = -jac[:, 1, 0]
    inv[:, 1, 1] = jac[:, 0, 0]
    inv /= det[:, None, None]
    h = np.einsum("qaM,qMK->qaK", dB, inv)
    return np.ascontiguousarray(h), w * det


def _inv(F):
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    inv = np.empty_like(F)
    inv[:, 0, 0] = F[:, 1, 1]
    inv[:, 0, 1] = -F[:, 0, 1]
    inv[:, 1, 0] = -F[:, 1, 0]
    inv[:, 1, 1] = F[:, 0, 0]
    return inv / det[:, None, None], det


def energy_min_det(h, wdet, defc, mu, kappa, out):
    F = _def_grads(h, defc)
    J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    out[1] = J.min()
    ok = J > 0.0
    bad = int(not ok.all())
    Jok = J[ok]
    i1 = np.einsum("qiK,qiK->q", F, F)[ok]
    lj = np.log(Jok)
    dens = 0.5 * mu * (i1 - 2.0 - 2.0 * lj) + 0.5 * kappa * lj * lj
    out[0] += wdet[ok] @ dens
    return bad


def _piola(F, J, mu, kappa):
    lj = np.log(J)
    Finv, _ = _inv(F)
    FinvT = np.swapaxes(Finv, 1, 2)
    c = (kappa * lj - mu)[:, None, None]
    return mu * F + c * FinvT, Finv, lj


def residual(h, wdet, defc, mu, kappa, out):
    F = _def_grads(h, defc)
    J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(J <= 0.0):
        return 1
    P, _, _ = _piola(F, J, mu, kappa)
    out += np.einsum("q,qiK,qaK->ai", wdet, P, h)
    return 0


def hessian(h, wdet, defc, mu, kappa, out, scratch=None):
    n = h.shape[1]
    F = _def_grads(h, defc)
    J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(J <= 0.0):
        return 1
    Finv, _ = _inv(F)
    lj = np.log(J)
    p = np.einsum("qaM,qMk->qak", h, Finv)
    dots = np.einsum("q,qaK,qbK->ab", wdet * mu, h, h)
    c2 = wdet * (mu - kappa * lj)
    c3 = wdet * kappa
    # block[a,i,b,k] = mu (ha.hb) d_ik + c2 pa[k] pb[i] + c3 pa[i] pb[k]
    blocks = np.einsum("q,qak,qbi->aibk", c2, p, p)
    blocks += np.einsum("q,qai,qbk->aibk", c3, p, p)
    blocks[:, 0, :, 0] += dots
    blocks[:, 1, :, 1] += dots
    out += blocks.reshape(2 * n, 2 * n)
    return 0


def mixed_vjp(dB, w, ref, defc, lam, mu, kappa, out):
    """Accumulate lam contracted with d(residual)/d(reference net).

    Same contraction as the compiled twin: the variation of the residual
    with the reference control points through the pullback gradients, the
    deformation gradient and the integration measure.
    """
    jac = np.einsum("am,qaM->qmM", ref, dB)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    if np.any(det <= 0.0):
        return 1
    inv = np.empty_like(jac)
    inv[:, 0, 0] = jac[:, 1, 1]
    inv[:, 0, 1] = -jac[:, 0, 1]
    inv[:, 1, 0] = -jac[:, 1, 0]
    inv[:, 1, 1] = jac[:, 0, 0]
    inv /= det[:, None, None]
    h = np.einsum("qaM,qMK->qaK", dB, inv)
    wdet = w * det
    F = _def_grads(h, defc)
    J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(J <= 0.0):
        return 1
    P, Finv, lj = _piola(F, J, mu, kappa)
    # tangent modulus A[i,K,m,N]
    nq = h.shape[0]
    eye = np.eye(2)
    A = mu * np.einsum("im,KN->iKmN", eye, eye)[None] \
        + (mu - kappa * lj)[:, None, None, None, None] \
        * np.einsum("qKm,qNi->qiKmN", Finv, Finv) \
        + kappa * np.einsum("qKi,qNm->qiKmN", Finv, Finv)
    # residual variation terms contracted with lam
    Pha = np.einsum("qiK,qaK->qai", P, h)
    s1 = np.einsum("ai,qai->q", lam, Pha)
    T = np.einsum("ai,qal->qil", lam, h)
    Y = np.einsum("ai,qaK,qiKmN->qmN", lam, h, A)
    Z = np.einsum("qml,qmN->qlN", F[:, :, :], Y)  # (F^T Y)[l,N]
    out += np.einsum("q,qbl,q->bl", wdet, h, s1)
    out -= np.einsum("q,qlN,qbN->bl", wdet, Z, h)
    out -= np.einsum("q,qiK,qbK,qil->bl", wdet, P, h, T)
    return 0
