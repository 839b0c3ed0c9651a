# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for symmetric band matrices in LAPACK lower storage.

``ab[k, j]`` holds ``A[j + k, j]``. Every routine mirrors one in
:mod:`vbsv._bandpy`; the two must agree to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def chol(const double[:, ::1] ab, double tol):
    """Return ``(lb, info)``; ``info`` is -1 on success, else the failing row."""
    cdef Py_ssize_t w = ab.shape[0] - 1
    cdef Py_ssize_t n = ab.shape[1]
    cdef Py_ssize_t i, j, k, m, lo
    cdef double s, piv
    lb_arr = np.zeros((w + 1, n), dtype=np.float64)
    cdef double[:, ::1] lb = lb_arr
    for j in range(n):
        s = ab[0, j]
        lo = j - w if j >= w else 0
        for m in range(lo, j):
            s -= lb[j - m, m] * lb[j - m, m]
        if s <= tol:
            return lb_arr, j
        piv = sqrt(s)
        lb[0, j] = piv
        for k in range(1, w + 1):
            i = j + k
            if i >= n:
                break
            s = ab[k, j]
            lo = i - w if i >= w else 0
            for m in range(lo, j):
                s -= lb[i - m, m] * lb[j - m, m]
            lb[k, j] = s / piv
    return lb_arr, -1


def forward(const double[:, ::1] lb, const double[:, ::1] b):
    """Solve ``L z = b`` for every column of ``b`` (shape ``(n, r)``)."""
    cdef Py_ssize_t w = lb.shape[0] - 1
    cdef Py_ssize_t n = lb.shape[1]
    cdef Py_ssize_t r = b.shape[1]
    cdef Py_ssize_t i, m, c, lo
    cdef double lim, d
    z_arr = np.array(b, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] z = z_arr
    for i in range(n):
        lo = i - w if i >= w else 0
        for m in range(lo, i):
            lim = lb[i - m, m]
            for c in range(r):
                z[i, c] -= lim * z[m, c]
        d = lb[0, i]
        for c in range(r):
            z[i, c] /= d
    return z_arr


def backward(const double[:, ::1] lb, const double[:, ::1] b):
    """Solve ``L' x = b`` for every column of ``b``."""
    cdef Py_ssize_t w = lb.shape[0] - 1
    cdef Py_ssize_t n = lb.shape[1]
    cdef Py_ssize_t r = b.shape[1]
    cdef Py_ssize_t i, k, c
    cdef double lki, d
    x_arr = np.array(b, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] x = x_arr
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, min(i + w + 1, n)):
            lki = lb[k - i, i]
            for c in range(r):
                x[i, c] -= lki * x[k, c]
        d = lb[0, i]
        for c in range(r):
            x[i, c] /= d
    return x_arr


def selinv(const double[:, ::1] lb):
    """In-band entries of ``(L L')^{-1}`` in the same lower storage."""
    cdef Py_ssize_t w = lb.shape[0] - 1
    cdef Py_ssize_t n = lb.shape[1]
    cdef Py_ssize_t i, j, k, hi, d
    cdef double s, ljj
    sb_arr = np.zeros((w + 1, n), dtype=np.float64)
    cdef double[:, ::1] sb = sb_arr
    for j in range(n - 1, -1, -1):
        ljj = lb[0, j]
        hi = min(j + w, n - 1)
        # off-diagonal entries S[i, j], i in (j, j + w]
        for i in range(hi, j, -1):
            s = 0.0
            for k in range(j + 1, hi + 1):
                # S[i, k] with both indices > j; read from lower storage
                if k <= i:
                    s += lb[k - j, j] * sb[i - k, k]
                else:
                    s += lb[k - j, j] * sb[k - i, i]
            sb[i - j, j] = -s / ljj
        s = 1.0 / ljj
        for k in range(j + 1, hi + 1):
            s -= lb[k - j, j] * sb[k - j, j]
        sb[0, j] = s / ljj
    return sb_arr
