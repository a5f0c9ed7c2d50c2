# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for one-dimensional polynomial regression and path functionals."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def poly_gram(const double[::1] z, int degree):
    """Sums of z**(a + b) for a, b <= degree, in one pass over the samples."""
    cdef Py_ssize_t n = z.shape[0]
    cdef int nb = degree + 1
    cdef int nm = 2 * degree + 1
    cdef double[::1] s = np.zeros(nm)
    cdef double zk
    cdef Py_ssize_t i
    cdef int k, a, b
    for i in range(n):
        zk = 1.0
        for k in range(nm):
            s[k] += zk
            zk *= z[i]
    out = np.empty((nb, nb))
    cdef double[:, ::1] g = out
    for a in range(nb):
        for b in range(nb):
            g[a, b] = s[a + b]
    return out


def poly_rhs(const double[::1] z, const double[:, ::1] targets, int degree):
    """Sums of z**a * targets[:, j] for a <= degree."""
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t m = targets.shape[1]
    cdef int nb = degree + 1
    out = np.zeros((nb, m))
    cdef double[:, ::1] r = out
    cdef double zk, t
    cdef Py_ssize_t i, j
    cdef int k
    for i in range(n):
        for j in range(m):
            t = targets[i, j]
            zk = 1.0
            for k in range(nb):
                r[k, j] += zk * t
                zk *= z[i]
    return out


def poly_eval(const double[::1] z, const double[:, ::1] coef):
    """Horner evaluation of coef[:, j] at every sample."""
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t m = coef.shape[1]
    cdef int nb = coef.shape[0]
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    cdef double acc, zi
    cdef Py_ssize_t i, j
    cdef int k
    for i in range(n):
        zi = z[i]
        for j in range(m):
            acc = coef[nb - 1, j]
            for k in range(nb - 2, -1, -1):
                acc = acc * zi + coef[k, j]
            o[i, j] = acc
    return out


def suffix_max_abs(const double[:, ::1] y):
    """out[i, p] = max_{j >= i} |y[j, p]|."""
    cdef Py_ssize_t L = y.shape[0]
    cdef Py_ssize_t P = y.shape[1]
    out = np.empty((L, P))
    if L == 0:
        return out
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, p
    cdef double v
    for p in range(P):
        o[L - 1, p] = fabs(y[L - 1, p])
    for i in range(L - 2, -1, -1):
        for p in range(P):
            v = fabs(y[i, p])
            o[i, p] = v if v > o[i + 1, p] else o[i + 1, p]
    return out
