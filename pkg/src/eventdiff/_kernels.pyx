# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fixed-step RK4 integrator for the bundled ODE systems.

Mirrors ``eventdiff._kernels_py`` operation for operation; system ids and
parameter layouts are defined in ``eventdiff.kernels``.
"""
import numpy as np

from libc.math cimport sin, cos, isfinite


cdef void _rhs(int kind, const double* p, const double* x, double* out,
               Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i
    cdef double s, u1, u2, u3, x1, y1, x2, y2
    cdef double th1, th2, p1, p2, m1, m2, l1, l2, g
    cdef double delta, sd, cd, den, c1, c2, num
    if kind == 0:
        for i in range(d):
            out[i] = -p[0] * x[i]
    elif kind == 1:
        s = p[3]
        u1 = s * x[0]
        u2 = s * x[1]
        u3 = s * x[2]
        out[0] = (p[0] * (u2 - u1)) / s
        out[1] = (u1 * (p[1] - u3) - u2) / s
        out[2] = (u1 * u2 - p[2] * u3) / s
    elif kind == 2:
        x1 = x[0]
        y1 = x[1]
        x2 = x[2]
        y2 = x[3]
        out[0] = (x1 * (p[0] - x1) * (x1 - 1.0) - y1
                  + p[6] * (p[7] * (x1 - x1) + p[8] * (x2 - x1)))
        out[1] = p[2] * x1 - p[4] * y1
        out[2] = (x2 * (p[1] - x2) * (x2 - 1.0) - y2
                  + p[6] * (p[9] * (x1 - x2) + p[10] * (x2 - x2)))
        out[3] = p[3] * x2 - p[5] * y2
    else:
        m1 = p[0]
        m2 = p[1]
        l1 = p[2]
        l2 = p[3]
        g = p[4]
        th1 = x[0]
        th2 = x[1]
        p1 = x[2]
        p2 = x[3]
        delta = th1 - th2
        sd = sin(delta)
        cd = cos(delta)
        den = m1 + m2 * sd * sd
        out[0] = (l2 * p1 - l1 * p2 * cd) / (l1 * l1 * l2 * den)
        out[1] = (-m2 * l2 * p1 * cd + (m1 + m2) * l1 * p2) / (m2 * l1 * l2 * l2 * den)
        c1 = p1 * p2 * sd / (l1 * l2 * den)
        num = (m2 * l2 * l2 * p1 * p1 + (m1 + m2) * l1 * l1 * p2 * p2
               - 2.0 * m2 * l1 * l2 * p1 * p2 * cd)
        c2 = num * sin(2.0 * delta) / (2.0 * l1 * l1 * l2 * l2 * den * den)
        out[2] = -(m1 + m2) * g * l1 * sin(th1) - c1 + c2
        out[3] = -m2 * g * l2 * sin(th2) + c1 - c2


def rk4_integrate(int kind, double[::1] params, double[:, ::1] x0, double dt,
                  Py_ssize_t n_steps, Py_ssize_t record_every):
    """Integrate every row of ``x0``; see ``eventdiff.kernels.rk4_integrate``."""
    cdef Py_ssize_t n = x0.shape[0]
    cdef Py_ssize_t d = x0.shape[1]
    cdef Py_ssize_t n_rec = n_steps // record_every + 1
    out_arr = np.full((n, n_rec, d), np.nan)
    failed_arr = np.full(n, -1, dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef long long[::1] failed = failed_arr
    cdef double[::1] x = np.empty(d)
    cdef double[::1] tmp = np.empty(d)
    cdef double[::1] k1 = np.empty(d)
    cdef double[::1] k2 = np.empty(d)
    cdef double[::1] k3 = np.empty(d)
    cdef double[::1] k4 = np.empty(d)
    cdef const double* p = &params[0]
    cdef Py_ssize_t j, step, i, rec
    cdef double half = 0.5 * dt
    cdef double sixth = dt / 6.0
    cdef bint ok
    with nogil:
        for j in range(n):
            for i in range(d):
                x[i] = x0[j, i]
                out[j, 0, i] = x[i]
            rec = 1
            for step in range(1, n_steps + 1):
                _rhs(kind, p, &x[0], &k1[0], d)
                for i in range(d):
                    tmp[i] = x[i] + half * k1[i]
                _rhs(kind, p, &tmp[0], &k2[0], d)
                for i in range(d):
                    tmp[i] = x[i] + half * k2[i]
                _rhs(kind, p, &tmp[0], &k3[0], d)
                for i in range(d):
                    tmp[i] = x[i] + dt * k3[i]
                _rhs(kind, p, &tmp[0], &k4[0], d)
                ok = True
                for i in range(d):
                    x[i] = x[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                    if not isfinite(x[i]):
                        ok = False
                if not ok:
                    failed[j] = step
                    break
                if step % record_every == 0:
                    for i in range(d):
                        out[j, rec, i] = x[i]
                    rec += 1
    return out_arr, failed_arr
