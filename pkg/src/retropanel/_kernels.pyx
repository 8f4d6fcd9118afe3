# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops; see ``_kernels_py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs

cnp.import_array()

cdef double _TINY = 1e-300


def fe_sweeps(double[:, ::1] R, double[:, ::1] w, double[::1] gamma,
              double[::1] delta, int max_sweeps=200, double tol=1e-12):
    cdef Py_ssize_t n = R.shape[0], m = R.shape[1], i, t
    cdef double[::1] row_w = np.zeros(n)
    cdef double[::1] col_w = np.zeros(m)
    cdef double[::1] wr_row = np.zeros(n)
    cdef double[::1] wr_col = np.zeros(m)
    cdef double rmax = 0.0, acc, change, v, wit
    cdef int sweep, sweeps = 0
    for i in range(n):
        for t in range(m):
            wit = w[i, t]
            v = wit * R[i, t]
            row_w[i] += wit
            col_w[t] += wit
            wr_row[i] += v
            wr_col[t] += v
            if fabs(R[i, t]) > rmax:
                rmax = fabs(R[i, t])
    cdef double scale = tol * (1.0 + rmax)
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        change = 0.0
        for i in range(n):
            if row_w[i] > 0:
                acc = wr_row[i]
                for t in range(m):
                    acc -= w[i, t] * delta[t]
                v = acc / row_w[i]
                if fabs(v - gamma[i]) > change:
                    change = fabs(v - gamma[i])
                gamma[i] = v
        for t in range(m):
            if col_w[t] > 0:
                acc = wr_col[t]
                for i in range(n):
                    acc -= w[i, t] * gamma[i]
                v = acc / col_w[t]
                if fabs(v - delta[t]) > change:
                    change = fabs(v - delta[t])
                delta[t] = v
        if change <= scale:
            break
    return sweeps


def twoway_demean(M, double tol=1e-10, int max_iter=1000):
    out_arr = np.array(M, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n = out.shape[0], m = out.shape[1], i, t
    cdef double acc, worst
    cdef int it, iters = 0
    for it in range(max_iter):
        iters = it + 1
        for i in range(n):
            acc = 0.0
            for t in range(m):
                acc += out[i, t]
            acc /= m
            for t in range(m):
                out[i, t] -= acc
        for t in range(m):
            acc = 0.0
            for i in range(n):
                acc += out[i, t]
            acc /= n
            for i in range(n):
                out[i, t] -= acc
        worst = 0.0
        for i in range(n):
            acc = 0.0
            for t in range(m):
                acc += out[i, t]
            if fabs(acc / m) > worst:
                worst = fabs(acc / m)
        if worst <= tol:
            break
    return out_arr, iters


cdef double _objective(double[::1] y, double[:, ::1] C, double[::1] omega,
                       double[::1] resid) noexcept:
    cdef Py_ssize_t nc = C.shape[0], T0 = C.shape[1], i, s
    cdef double acc, f = 0.0
    for s in range(T0):
        acc = y[s]
        for i in range(nc):
            acc -= omega[i] * C[i, s]
        resid[s] = acc
        f += acc * acc
    return f


def scm_eg(y_in, C_in, double eta0=0.1, double clip=5.0, double tol=1e-3,
           int max_iter=10000, int max_halvings=40):
    cdef double[::1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef double[:, ::1] C = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef Py_ssize_t nc = C.shape[0], T0 = C.shape[1], i, s
    omega_arr = np.full(nc, 1.0 / nc)
    cdef double[::1] omega = omega_arr
    cdef double[::1] cand = np.empty(nc)
    cdef double[::1] gc = np.empty(nc)
    cdef double[::1] resid = np.empty(T0)
    cdef double[::1] r_c = np.empty(T0)
    cdef double f, f_c, eta, acc, total, rel, gm, mn
    cdef int k, h, n_iter = 0
    cdef bint accepted, converged = False

    f = _objective(y, C, omega, resid)
    obj = [f]
    sum_err = [fabs(nc * (1.0 / nc) - 1.0)]
    min_w = [1.0 / nc]
    gmax = [0.0]
    for k in range(max_iter):
        if f <= _TINY:
            converged = True
            break
        for i in range(nc):
            acc = 0.0
            for s in range(T0):
                acc += C[i, s] * resid[s]
            acc *= -2.0
            if acc > clip:
                acc = clip
            elif acc < -clip:
                acc = -clip
            gc[i] = acc
        eta = eta0
        accepted = False
        for h in range(max_halvings):
            total = 0.0
            for i in range(nc):
                cand[i] = omega[i] * exp(-eta * gc[i])
                total += cand[i]
            for i in range(nc):
                cand[i] /= total
            f_c = _objective(y, C, cand, r_c)
            if f_c <= f:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            converged = True
            break
        n_iter = k + 1
        rel = (f - f_c) / (f if f > _TINY else _TINY)
        total = 0.0
        gm = 0.0
        mn = cand[0]
        for i in range(nc):
            omega[i] = cand[i]
            total += cand[i]
            if cand[i] < mn:
                mn = cand[i]
            if fabs(gc[i]) > gm:
                gm = fabs(gc[i])
        for s in range(T0):
            resid[s] = r_c[s]
        f = f_c
        obj.append(f)
        sum_err.append(fabs(total - 1.0))
        min_w.append(mn)
        gmax.append(gm)
        if rel < tol:
            converged = True
            break
    return (omega_arr, n_iter, bool(converged), np.array(obj), np.array(sum_err),
            np.array(min_w), np.array(gmax))
