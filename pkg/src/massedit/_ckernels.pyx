# cython: language_level=3
"""Compiled inner loops for the normal-equation solve and per-token shift math.

All routines take C-contiguous float64 arrays. Error handling lives in
``massedit.kernels``; these functions only report status codes.
"""
import numpy as np

from libc.math cimport sqrt, isfinite


def cholesky_lower(const double[:, ::1] a, double tol):
    """Lower Cholesky factor of ``a`` (only its lower triangle is read).

    Returns ``(L, pivot, value)`` where ``pivot`` is -1 on success, otherwise
    the index of the first diagonal update that fell to or below ``tol``.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s, ljj
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] L = out
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not (s > tol) or not isfinite(s):
            return out, j, s
        ljj = sqrt(s)
        L[j, j] = ljj
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / ljj
    return out, -1, 0.0


def solve_lower_t_right(const double[:, ::1] L, const double[:, ::1] b):
    """Solve ``X @ L.T = b`` row by row (forward substitution)."""
    cdef Py_ssize_t n = L.shape[0]
    cdef Py_ssize_t rows = b.shape[0]
    cdef Py_ssize_t r, i, k
    cdef double s
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] x = out
    for r in range(rows):
        for i in range(n):
            s = b[r, i]
            for k in range(i):
                s -= L[i, k] * x[r, k]
            x[r, i] = s / L[i, i]
    return out


def solve_lower_right(const double[:, ::1] L, const double[:, ::1] b):
    """Solve ``X @ L = b`` row by row (backward substitution)."""
    cdef Py_ssize_t n = L.shape[0]
    cdef Py_ssize_t rows = b.shape[0]
    cdef Py_ssize_t r, i, k
    cdef double s
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] x = out
    lt_arr = np.ascontiguousarray(np.asarray(L).T)
    cdef double[:, ::1] lt = lt_arr
    for r in range(rows):
        for i in range(n - 1, -1, -1):
            s = b[r, i]
            for k in range(i + 1, n):
                s -= lt[i, k] * x[r, k]
            x[r, i] = s / L[i, i]
    return out


def cho_solve_right(const double[:, ::1] L, const double[:, ::1] b):
    """Solve ``X @ (L @ L.T) = b``."""
    return solve_lower_right(L, solve_lower_t_right(L, b))


def value_differences(const double[:, ::1] pkeys, const double[:, ::1] keys,
                      const double[:, ::1] pgrads, double eta):
    """Scalar-first rank-1 value change: ``d_j = -eta * (pk_j . k_j) * pg_j``."""
    cdef Py_ssize_t n = keys.shape[0]
    cdef Py_ssize_t d = keys.shape[1]
    cdef Py_ssize_t dp = pgrads.shape[1]
    cdef Py_ssize_t j, k
    cdef double c
    out = np.empty((n, dp), dtype=np.float64)
    coef = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] dv = out
    cdef double[::1] cv = coef
    for j in range(n):
        c = 0.0
        for k in range(d):
            c += pkeys[j, k] * keys[j, k]
        c = -eta * c
        cv[j] = c
        for k in range(dp):
            dv[j, k] = c * pgrads[j, k]
    return out, coef


def residuals(const double[:, ::1] shift, const double[:, ::1] keys,
              const double[:, ::1] diffs):
    """Per-token ``||shift @ k_j - d_j||`` and ``||d_j||``."""
    cdef Py_ssize_t n = keys.shape[0]
    cdef Py_ssize_t d = keys.shape[1]
    cdef Py_ssize_t dp = shift.shape[0]
    cdef Py_ssize_t j, a, k
    cdef double s, num, den
    num_arr = np.empty(n, dtype=np.float64)
    den_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] nv = num_arr
    cdef double[::1] dn = den_arr
    for j in range(n):
        num = 0.0
        den = 0.0
        for a in range(dp):
            s = -diffs[j, a]
            for k in range(d):
                s += shift[a, k] * keys[j, k]
            num += s * s
            den += diffs[j, a] * diffs[j, a]
        nv[j] = sqrt(num)
        dn[j] = sqrt(den)
    return num_arr, den_arr
