# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled assembly kernels for the Neo-Hookean patch integrals.

Mirrors cellmech._kernels_np; cellmech.kernels selects the backend at
import time.  Routines accumulate into caller-provided output arrays and
return an int status: 0 on success, 1 if det F <= 0 was met at any
quadrature point (the caller treats that state as inverted).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log

cnp.import_array()

BACKEND = "cython"


def reference_tables(double[:, :, ::1] dB, double[::1] w, double[:, ::1] ref):
    """Physical basis gradients h and weighted measure w*det(dX/dxi).

    Returns (h, wdet) with shapes (nq, n, 2) and (nq,).  Raises
    ValueError when the reference mapping is degenerate.
    """
    cdef Py_ssize_t nq = dB.shape[0]
    cdef Py_ssize_t n = dB.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] h_arr = np.empty((nq, n, 2))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] wdet_arr = np.empty(nq)
    cdef double[:, :, ::1] h = h_arr
    cdef double[::1] wdet = wdet_arr
    cdef Py_ssize_t q, a
    cdef double j00, j01, j10, j11, det, i00, i01, i10, i11, g0, g1
    for q in range(nq):
        j00 = 0.0; j01 = 0.0; j10 = 0.0; j11 = 0.0
        for a in range(n):
            g0 = dB[q, a, 0]; g1 = dB[q, a, 1]
            j00 += ref[a, 0] * g0
            j01 += ref[a, 0] * g1
            j10 += ref[a, 1] * g0
            j11 += ref[a, 1] * g1
        det = j00 * j11 - j01 * j10
        if det <= 0.0:
            raise ValueError("degenerate reference mapping (det <= 0)")
        i00 = j11 / det; i01 = -j01 / det
        i10 = -j10 / det; i11 = j00 / det
        for a in range(n):
            g0 = dB[q, a, 0]; g1 = dB[q, a, 1]
            # grad_X B_a = J^{-T} grad_xi B_a
            h[q, a, 0] = i00 * g0 + i10 * g1
            h[q, a, 1] = i01 * g0 + i11 * g1
        wdet[q] = w[q] * det
    return h_arr, wdet_arr


def energy_min_det(double[:, :, ::1] h, double[::1] wdet, double[:, ::1] defc,
                   double mu, double kappa, double[::1] out):
    """out[0] += strain energy, out[1] = min det F over the points."""
    cdef Py_ssize_t nq = h.shape[0]
    cdef Py_ssize_t n = h.shape[1]
    cdef double energy = 0.0, min_det = 1e300
    cdef Py_ssize_t q, a
    cdef double f00, f01, f10, f11, J, i1, lj
    cdef int bad = 0
    for q in range(nq):
        f00 = 0.0; f01 = 0.0; f10 = 0.0; f11 = 0.0
        for a in range(n):
            f00 += defc[a, 0] * h[q, a, 0]
            f01 += defc[a, 0] * h[q, a, 1]
            f10 += defc[a, 1] * h[q, a, 0]
            f11 += defc[a, 1] * h[q, a, 1]
        J = f00 * f11 - f01 * f10
        if J < min_det:
            min_det = J
        if J <= 0.0:
            bad = 1
            continue
        i1 = f00 * f00 + f01 * f01 + f10 * f10 + f11 * f11
        lj = log(J)
        energy += wdet[q] * (0.5 * mu * (i1 - 2.0 - 2.0 * lj) + 0.5 * kappa * lj * lj)
    out[0] += energy
    out[1] = min_det
    return bad


def residual(double[:, :, ::1] h, double[::1] wdet, double[:, ::1] defc,
             double mu, double kappa, double[:, ::1] out):
    """Accumulate d(energy)/d(defc) into out with shape (n, 2)."""
    cdef Py_ssize_t nq = h.shape[0]
    cdef Py_ssize_t n = h.shape[1]
    cdef Py_ssize_t q, a
    cdef double f00, f01, f10, f11, J, lj, c, wq
    cdef double p00, p01, p10, p11
    for q in range(nq):
        f00 = 0.0; f01 = 0.0; f10 = 0.0; f11 = 0.0
        for a in range(n):
            f00 += defc[a, 0] * h[q, a, 0]
            f01 += defc[a, 0] * h[q, a, 1]
            f10 += defc[a, 1] * h[q, a, 0]
            f11 += defc[a, 1] * h[q, a, 1]
        J = f00 * f11 - f01 * f10
        if J <= 0.0:
            return 1
        lj = log(J)
        c = kappa * lj - mu
        wq = wdet[q]
        # P = mu F + (kappa log J - mu) F^{-T}, premultiplied by the measure
        p00 = wq * (mu * f00 + c * (f11 / J))
        p01 = wq * (mu * f01 + c * (-f10 / J))
        p10 = wq * (mu * f10 + c * (-f01 / J))
        p11 = wq * (mu * f11 + c * (f00 / J))
        for a in range(n):
            out[a, 0] += p00 * h[q, a, 0] + p01 * h[q, a, 1]
            out[a, 1] += p10 * h[q, a, 0] + p11 * h[q, a, 1]
    return 0


def hessian(double[:, :, ::1] h, double[::1] wdet, double[:, ::1] defc,
            double mu, double kappa, double[:, ::1] out, double[:, ::1] scratch):
    """Accumulate d2(energy)/d(defc)2 into out (2n, 2n); scratch is (n, 2).

    Uses the rank-expanded tangent: for local functions a, b the 2x2
    block is  mu (h_a.h_b) I + (mu - kappa logJ) p_a p_b^T(swapped)
    + kappa p_a p_b^T  with p_a = F^{-T} applied to h_a on the right.
    """
    cdef Py_ssize_t nq = h.shape[0]
    cdef Py_ssize_t n = h.shape[1]
    cdef Py_ssize_t q, a, b
    cdef double f00, f01, f10, f11, J, lj, wq, c2, c3, muw
    cdef double dot, pa0, pa1, pb0, pb1, ha0, ha1
    cdef double v00, v01, v10, v11
    for q in range(nq):
        f00 = 0.0; f01 = 0.0; f10 = 0.0; f11 = 0.0
        for a in range(n):
            f00 += defc[a, 0] * h[q, a, 0]
            f01 += defc[a, 0] * h[q, a, 1]
            f10 += defc[a, 1] * h[q, a, 0]
            f11 += defc[a, 1] * h[q, a, 1]
        J = f00 * f11 - f01 * f10
        if J <= 0.0:
            return 1
        lj = log(J)
        wq = wdet[q]
        muw = mu * wq
        c2 = (mu - kappa * lj) * wq
        c3 = kappa * wq
        # p_a[k] = h_a[M] (F^{-1})[M, k]
        for a in range(n):
            scratch[a, 0] = (h[q, a, 0] * f11 - h[q, a, 1] * f10) / J
            scratch[a, 1] = (-h[q, a, 0] * f01 + h[q, a, 1] * f00) / J
        for a in range(n):
            ha0 = h[q, a, 0]; ha1 = h[q, a, 1]
            pa0 = scratch[a, 0]; pa1 = scratch[a, 1]
            for b in range(a, n):
                dot = muw * (ha0 * h[q, b, 0] + ha1 * h[q, b, 1])
                pb0 = scratch[b, 0]; pb1 = scratch[b, 1]
                # block[i,k] = dot d_ik + c2 p_a[k] p_b[i] + c3 p_a[i] p_b[k]
                v00 = dot + (c2 + c3) * pa0 * pb0
                v01 = c2 * pa1 * pb0 + c3 * pa0 * pb1
                v10 = c2 * pa0 * pb1 + c3 * pa1 * pb0
                v11 = dot + (c2 + c3) * pa1 * pb1
                out[2 * a, 2 * b] += v00
                out[2 * a, 2 * b + 1] += v01
                out[2 * a + 1, 2 * b] += v10
                out[2 * a + 1, 2 * b + 1] += v11
                if b > a:
                    out[2 * b, 2 * a] += v00
                    out[2 * b + 1, 2 * a] += v01
                    out[2 * b, 2 * a + 1] += v10
                    out[2 * b + 1, 2 * a + 1] += v11
    return 0


def mixed_vjp(double[:, :, ::1] dB, double[::1] w, double[:, ::1] ref,
              double[:, ::1] defc, double[:, ::1] lam,
              double mu, double kappa, double[:, ::1] out):
    """Accumulate lam_a[i] * d(residual_a[i])/d(ref_b[l]) into out (n, 2).

    The reference net enters the residual through the pullback metric,
    the deformation gradient and the integration measure; all three
    variations are contracted against the adjoint vector here.
    """
    cdef Py_ssize_t nq = dB.shape[0]
    cdef Py_ssize_t n = dB.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h_arr = np.empty((n, 2))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p_arr = np.empty((n, 2))
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] p = p_arr
    cdef Py_ssize_t q, a, b
    cdef double j00, j01, j10, j11, det, i00, i01, i10, i11, g0, g1
    cdef double f00, f01, f10, f11, J, lj, wq, c
    cdef double p00, p01, p10, p11
    cdef double s1, la0, la1, qa0, qa1, slp
    cdef double t00, t01, t10, t11
    cdef double v00, v01, v10, v11
    cdef double y00, y01, y10, y11, z00, z01, z10, z11
    cdef double hb0, hb1, phb0, phb1, c2
    for q in range(nq):
        j00 = 0.0; j01 = 0.0; j10 = 0.0; j11 = 0.0
        for a in range(n):
            g0 = dB[q, a, 0]; g1 = dB[q, a, 1]
            j00 += ref[a, 0] * g0
            j01 += ref[a, 0] * g1
            j10 += ref[a, 1] * g0
            j11 += ref[a, 1] * g1
        det = j00 * j11 - j01 * j10
        if det <= 0.0:
            return 1
        i00 = j11 / det; i01 = -j01 / det
        i10 = -j10 / det; i11 = j00 / det
        for a in range(n):
            g0 = dB[q, a, 0]; g1 = dB[q, a, 1]
            h[a, 0] = i00 * g0 + i10 * g1
            h[a, 1] = i01 * g0 + i11 * g1
        f00 = 0.0; f01 = 0.0; f10 = 0.0; f11 = 0.0
        for a in range(n):
            f00 += defc[a, 0] * h[a, 0]
            f01 += defc[a, 0] * h[a, 1]
            f10 += defc[a, 1] * h[a, 0]
            f11 += defc[a, 1] * h[a, 1]
        J = f00 * f11 - f01 * f10
        if J <= 0.0:
            return 1
        lj = log(J)
        wq = w[q] * det
        c = kappa * lj - mu
        c2 = mu - kappa * lj
        # first Piola stress
        p00 = mu * f00 + c * (f11 / J)
        p01 = mu * f01 + c * (-f10 / J)
        p10 = mu * f10 + c * (-f01 / J)
        p11 = mu * f11 + c * (f00 / J)
        # p_a[k] = h_a[M] (F^{-1})[M,k]
        for a in range(n):
            p[a, 0] = (h[a, 0] * f11 - h[a, 1] * f10) / J
            p[a, 1] = (-h[a, 0] * f01 + h[a, 1] * f00) / J
        # adjoint contractions over a:
        #   s1 = sum lam_a . (P h_a)
        #   T[i,l] = sum lam_a[i] h_a[l]
        #   V[m,N] = sum p_a[m] (F^{-1} lam_a)[N]
        #   slp = sum lam_a . p_a
        s1 = 0.0; slp = 0.0
        t00 = 0.0; t01 = 0.0; t10 = 0.0; t11 = 0.0
        v00 = 0.0; v01 = 0.0; v10 = 0.0; v11 = 0.0
        for a in range(n):
            la0 = lam[a, 0]; la1 = lam[a, 1]
            if la0 == 0.0 and la1 == 0.0:
                continue
            s1 += la0 * (p00 * h[a, 0] + p01 * h[a, 1]) \
                + la1 * (p10 * h[a, 0] + p11 * h[a, 1])
            t00 += la0 * h[a, 0]; t01 += la0 * h[a, 1]
            t10 += la1 * h[a, 0]; t11 += la1 * h[a, 1]
            qa0 = (f11 * la0 - f01 * la1) / J
            qa1 = (-f10 * la0 + f00 * la1) / J
            v00 += p[a, 0] * qa0; v01 += p[a, 0] * qa1
            v10 += p[a, 1] * qa0; v11 += p[a, 1] * qa1
            slp += la0 * p[a, 0] + la1 * p[a, 1]
        # Y[m,N] = mu T[m,N] + c2 V[m,N] + kappa slp (F^{-1})[N,m]
        y00 = mu * t00 + c2 * v00 + kappa * slp * (f11 / J)
        y01 = mu * t01 + c2 * v01 + kappa * slp * (-f10 / J)
        y10 = mu * t10 + c2 * v10 + kappa * slp * (-f01 / J)
        y11 = mu * t11 + c2 * v11 + kappa * slp * (f00 / J)
        # Z = F^T Y
        z00 = f00 * y00 + f10 * y10
        z01 = f00 * y01 + f10 * y11
        z10 = f01 * y00 + f11 * y10
        z11 = f01 * y01 + f11 * y11
        for b in range(n):
            hb0 = h[b, 0]; hb1 = h[b, 1]
            phb0 = p00 * hb0 + p01 * hb1
            phb1 = p10 * hb0 + p11 * hb1
            out[b, 0] += wq * (hb0 * s1
                               - (z00 * hb0 + z01 * hb1)
                               - (phb0 * t00 + phb1 * t10))
            out[b, 1] += wq * (hb1 * s1
                               - (z10 * hb0 + z11 * hb1)
                               - (phb0 * t01 + phb1 * t11))
    return 0
