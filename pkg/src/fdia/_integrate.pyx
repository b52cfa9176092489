# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integration kernel; same contract as ``_integrate_py``."""
from libc.math cimport cos, sin, isfinite
from scipy.linalg.cython_blas cimport dgemv


cdef void _matvec_add(double[:, ::1] A, double* x, double* y) noexcept nogil:
    # y += A @ x for a C-contiguous square A (passed to Fortran BLAS as A^T)
    cdef int n = <int>A.shape[0]
    cdef int inc = 1
    cdef double one = 1.0
    cdef char trans = b'T'
    dgemv(&trans, &n, &n, &one, &A[0, 0], &n, x, &inc, &one, y, &inc)


def integrate_chunk(double[::1] y, double[:, ::1] xi, double[:, ::1] E, double[:, ::1] L,
                    Py_ssize_t[::1] f_idx, Py_ssize_t[::1] t_idx, double[::1] g, double[::1] b,
                    double[::1] hs, double[::1] theta, double[::1] vm,
                    Py_ssize_t[::1] ang_pos, Py_ssize_t[::1] mag_pos, Py_ssize_t[::1] om_pos, Py_ssize_t[::1] kind,
                    double[::1] c1, double[::1] c2, double[::1] c3, double[::1] c4,
                    Py_ssize_t record_every, Py_ssize_t step0, double[:, ::1] out_theta,
                    double[:, ::1] out_vm, double vmin, double vmax):
    cdef Py_ssize_t n = theta.shape[0]
    cdef Py_ssize_t m = g.shape[0]
    cdef Py_ssize_t ns = y.shape[0]
    cdef Py_ssize_t steps = xi.shape[0]
    cdef Py_ssize_t k, i, l, fi, ti
    cdef Py_ssize_t written = 0
    cdef double d, c, s, vf, vt, vv, om
    cdef double[::1] P = theta.copy()
    cdef double[::1] Q = theta.copy()
    cdef double[::1] f = y.copy()
    cdef bint bad = 0
    with nogil:
        for k in range(steps):
            for i in range(n):
                P[i] = 0.0
                Q[i] = 0.0
            for l in range(m):
                fi = f_idx[l]
                ti = t_idx[l]
                d = theta[fi] - theta[ti]
                c = cos(d)
                s = sin(d)
                vf = vm[fi]
                vt = vm[ti]
                vv = vf * vt
                P[fi] += vf * vf * g[l] - vv * (g[l] * c + b[l] * s)
                Q[fi] += -vf * vf * (b[l] + hs[l]) - vv * (g[l] * s - b[l] * c)
                P[ti] += vt * vt * g[l] - vv * (g[l] * c - b[l] * s)
                Q[ti] += -vt * vt * (b[l] + hs[l]) + vv * (g[l] * s + b[l] * c)
            for i in range(ns):
                f[i] = 0.0
            for i in range(n):
                if kind[i] == 1:
                    f[ang_pos[i]] = (c1[i] - P[i]) * c2[i]
                    f[mag_pos[i]] = (c3[i] - Q[i]) * c4[i]
                elif kind[i] == 2:
                    om = y[om_pos[i]]
                    f[ang_pos[i]] = om
                    f[om_pos[i]] = (c1[i] - P[i] - c3[i] * om) * c2[i]
            _matvec_add(E, &f[0], &y[0])
            _matvec_add(L, &xi[k, 0], &y[0])
            for i in range(n):
                if ang_pos[i] >= 0:
                    theta[i] = y[ang_pos[i]]
                if mag_pos[i] >= 0:
                    vm[i] = y[mag_pos[i]]
                if vm[i] < vmin or vm[i] > vmax or not isfinite(theta[i]):
                    bad = 1
            if bad:
                break
            if (step0 + k + 1) % record_every == 0:
                for i in range(n):
                    out_theta[written, i] = theta[i]
                    out_vm[written, i] = vm[i]
                written += 1
    if bad:
        return -(k + 1)
    return written
