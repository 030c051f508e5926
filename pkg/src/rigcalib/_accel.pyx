# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled backend for the per-correspondence Gauss-Newton kernel.

Mirrors rigcalib._kernels_py exactly: same contract, same summation order
(one pass over correspondences), fused 3x3 Cholesky solves instead of the
batched numpy.linalg calls.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def robust_normal_equations(d, sigma, jac, double delta):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_ = np.ascontiguousarray(d, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] s_ = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] j_ = np.ascontiguousarray(jac, dtype=np.float64)

    cdef Py_ssize_t n = d_.shape[0]
    cdef Py_ssize_t k = j_.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h = np.zeros((k, k), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.zeros(k, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] r_out = np.zeros(n, dtype=np.float64)
    if n == 0:
        return h, g, 0.0, r_out

    cdef double[:, ::1] dv = d_
    cdef double[:, :, ::1] sv = s_
    cdef double[:, :, ::1] jv = j_
    cdef double[:, ::1] hv = h
    cdef double[::1] gv = g
    cdef double[::1] rv = r_out

    # Scratch for S^-1 J (3 x K); K is small (<= 36 in practice).
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xj_arr = np.zeros((3, k), dtype=np.float64)
    cdef double[:, ::1] xj = xj_arr

    cdef double cost = 0.0
    cdef double l00, l10, l11, l20, l21, l22
    cdef double y0, y1, y2, x0, x1, x2
    cdef double r2, r, w, wsc
    cdef Py_ssize_t i, a, b

    for i in range(n):
        # Cholesky of the 3x3 SPD covariance: S = L L^T.
        l00 = sqrt(sv[i, 0, 0])
        l10 = sv[i, 1, 0] / l00
        l11 = sqrt(sv[i, 1, 1] - l10 * l10)
        l20 = sv[i, 2, 0] / l00
        l21 = (sv[i, 2, 1] - l20 * l10) / l11
        l22 = sqrt(sv[i, 2, 2] - l20 * l20 - l21 * l21)

        # x = S^-1 d via two triangular solves.
        y0 = dv[i, 0] / l00
        y1 = (dv[i, 1] - l10 * y0) / l11
        y2 = (dv[i, 2] - l20 * y0 - l21 * y1) / l22
        x2 = y2 / l22
        x1 = (y1 - l21 * x2) / l11
        x0 = (y0 - l10 * x1 - l20 * x2) / l00

        r2 = dv[i, 0] * x0 + dv[i, 1] * x1 + dv[i, 2] * x2
        if r2 < 0.0:
            r2 = 0.0
        r = sqrt(r2)
        rv[i] = r
        if delta > 0.0 and r > delta:
            w = delta / r
            cost += 2.0 * delta * r - delta * delta
        else:
            w = 1.0
            cost += r2

        for a in range(k):
            y0 = jv[i, 0, a] / l00
            y1 = (jv[i, 1, a] - l10 * y0) / l11
            y2 = (jv[i, 2, a] - l20 * y0 - l21 * y1) / l22
            xj[2, a] = y2 / l22
            xj[1, a] = (y1 - l21 * xj[2, a]) / l11
            xj[0, a] = (y0 - l10 * xj[1, a] - l20 * xj[2, a]) / l00

        for a in range(k):
            wsc = w * (jv[i, 0, a] * x0 + jv[i, 1, a] * x1 + jv[i, 2, a] * x2)
            gv[a] += wsc
            for b in range(a, k):
                hv[a, b] += w * (
                    jv[i, 0, a] * xj[0, b]
                    + jv[i, 1, a] * xj[1, b]
                    + jv[i, 2, a] * xj[2, b]
                )

    for a in range(k):
        for b in range(a + 1, k):
            hv[b, a] = hv[a, b]
    return h, g, cost, r_out


def mahalanobis_costs(d, sigma, double delta):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_ = np.ascontiguousarray(d, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] s_ = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef Py_ssize_t n = d_.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(n, dtype=np.float64)
    if n == 0:
        return out
    cdef double[:, ::1] dv = d_
    cdef double[:, :, ::1] sv = s_
    cdef double[::1] ov = out
    cdef double l00, l10, l11, l20, l21, l22, y0, y1, y2, x0, x1, x2, r2, r
    cdef Py_ssize_t i
    for i in range(n):
        l00 = sqrt(sv[i, 0, 0])
        l10 = sv[i, 1, 0] / l00
        l11 = sqrt(sv[i, 1, 1] - l10 * l10)
        l20 = sv[i, 2, 0] / l00
        l21 = (sv[i, 2, 1] - l20 * l10) / l11
        l22 = sqrt(sv[i, 2, 2] - l20 * l20 - l21 * l21)
        y0 = dv[i, 0] / l00
        y1 = (dv[i, 1] - l10 * y0) / l11
        y2 = (dv[i, 2] - l20 * y0 - l21 * y1) / l22
        x2 = y2 / l22
        x1 = (y1 - l21 * x2) / l11
        x0 = (y0 - l10 * x1 - l20 * x2) / l00
        r2 = dv[i, 0] * x0 + dv[i, 1] * x1 + dv[i, 2] * x2
        if r2 < 0.0:
            r2 = 0.0
        if delta > 0.0:
            r = sqrt(r2)
            if r > delta:
                ov[i] = 2.0 * delta * r - delta * delta
            else:
                ov[i] = r2
        else:
            ov[i] = r2
    return out
