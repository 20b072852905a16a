# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled power-flow hot kernels.

Loop implementations of the textbook polar mismatch/Jacobian formulas.
Angle differences use the sum identities on per-bus sin/cos tables, so
each call does O(n) trig instead of O(n^2). Interface-identical to
``_fallback``; selected at import by ``kernels.__init__`` when the
extension built.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin

cnp.import_array()


def bus_powers(double[:, ::1] G, double[:, ::1] B,
               double[::1] vm, double[::1] va):
    cdef Py_ssize_t n = vm.shape[0]
    cdef cnp.ndarray[double, ndim=1] p = np.zeros(n)
    cdef cnp.ndarray[double, ndim=1] q = np.zeros(n)
    cdef cnp.ndarray[double, ndim=1] cs = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] sn = np.empty(n)
    cdef double[::1] pv = p
    cdef double[::1] qv = q
    cdef double[::1] c = cs
    cdef double[::1] s = sn
    cdef Py_ssize_t i, k
    cdef double cth, sth, acc_p, acc_q, ci, si
    for i in range(n):
        c[i] = cos(va[i])
        s[i] = sin(va[i])
    for i in range(n):
        acc_p = 0.0
        acc_q = 0.0
        ci = c[i]
        si = s[i]
        for k in range(n):
            cth = ci * c[k] + si * s[k]
            sth = si * c[k] - ci * s[k]
            acc_p += vm[k] * (G[i, k] * cth + B[i, k] * sth)
            acc_q += vm[k] * (G[i, k] * sth - B[i, k] * cth)
        pv[i] = vm[i] * acc_p
        qv[i] = vm[i] * acc_q
    return p, q


def mismatch_jacobian(double[:, ::1] G, double[:, ::1] B,
                      double[::1] vm, double[::1] va,
                      double[::1] p_sched, double[::1] q_sched,
                      cnp.int64_t[::1] pvpq, cnp.int64_t[::1] pq):
    cdef Py_ssize_t n = vm.shape[0]
    cdef Py_ssize_t na = pvpq.shape[0]
    cdef Py_ssize_t nq = pq.shape[0]
    cdef Py_ssize_t m = na + nq

    cdef cnp.ndarray[double, ndim=1] p = np.zeros(n)
    cdef cnp.ndarray[double, ndim=1] q = np.zeros(n)
    cdef cnp.ndarray[double, ndim=1] cs = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] sn = np.empty(n)
    cdef double[::1] pv = p
    cdef double[::1] qv = q
    cdef double[::1] c = cs
    cdef double[::1] s = sn

    cdef Py_ssize_t i, k, r, cc
    cdef double cth, sth, acc_p, acc_q, ci, si

    for i in range(n):
        c[i] = cos(va[i])
        s[i] = sin(va[i])
    for i in range(n):
        acc_p = 0.0
        acc_q = 0.0
        ci = c[i]
        si = s[i]
        for k in range(n):
            cth = ci * c[k] + si * s[k]
            sth = si * c[k] - ci * s[k]
            acc_p += vm[k] * (G[i, k] * cth + B[i, k] * sth)
            acc_q += vm[k] * (G[i, k] * sth - B[i, k] * cth)
        pv[i] = vm[i] * acc_p
        qv[i] = vm[i] * acc_q

    cdef cnp.ndarray[double, ndim=1] F = np.empty(m)
    cdef double[::1] Fv = F
    for r in range(na):
        Fv[r] = pv[pvpq[r]] - p_sched[pvpq[r]]
    for r in range(nq):
        Fv[na + r] = qv[pq[r]] - q_sched[pq[r]]

    cdef cnp.ndarray[double, ndim=2] J = np.empty((m, m))
    cdef double[:, ::1] Jv = J

    # H = dP/dva, N = dP/dvm, M = dQ/dva, L = dQ/dvm
    for r in range(na):
        i = pvpq[r]
        ci = c[i]
        si = s[i]
        for cc in range(na):
            k = pvpq[cc]
            if i == k:
                Jv[r, cc] = -qv[i] - B[i, i] * vm[i] * vm[i]
            else:
                cth = ci * c[k] + si * s[k]
                sth = si * c[k] - ci * s[k]
                Jv[r, cc] = vm[i] * vm[k] * (G[i, k] * sth - B[i, k] * cth)
        for cc in range(nq):
            k = pq[cc]
            if i == k:
                Jv[r, na + cc] = pv[i] / vm[i] + G[i, i] * vm[i]
            else:
                cth = ci * c[k] + si * s[k]
                sth = si * c[k] - ci * s[k]
                Jv[r, na + cc] = vm[i] * (G[i, k] * cth + B[i, k] * sth)
    for r in range(nq):
        i = pq[r]
        ci = c[i]
        si = s[i]
        for cc in range(na):
            k = pvpq[cc]
            if i == k:
                Jv[na + r, cc] = pv[i] - G[i, i] * vm[i] * vm[i]
            else:
                cth = ci * c[k] + si * s[k]
                sth = si * c[k] - ci * s[k]
                Jv[na + r, cc] = -vm[i] * vm[k] * (G[i, k] * cth + B[i, k] * sth)
        for cc in range(nq):
            k = pq[cc]
            if i == k:
                Jv[na + r, na + cc] = qv[i] / vm[i] - B[i, i] * vm[i]
            else:
                cth = ci * c[k] + si * s[k]
                sth = si * c[k] - ci * s[k]
                Jv[na + r, na + cc] = vm[i] * (G[i, k] * sth - B[i, k] * cth)
    return F, J
