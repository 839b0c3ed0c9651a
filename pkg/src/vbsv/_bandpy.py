"""Pure-Python band kernels, used when the compiled extension is absent.

Same contracts as the Cython module ``vbsv._bandcore``: lower band storage
with ``ab[k, j] = A[j + k, j]``; right-hand sides are ``(n, r)`` arrays.
The sequential recursions run on Python lists, which is several times
faster than scalar indexing into numpy arrays.
"""

from __future__ import annotations

import math

import numpy as np


def chol(ab: np.ndarray, tol: float) -> tuple[np.ndarray, int]:
    w = ab.shape[0] - 1
    n = ab.shape[1]
    a = ab.tolist()
    lb = [[0.0] * n for _ in range(w + 1)]
    for j in range(n):
        s = a[0][j]
        for m in range(max(0, j - w), j):
            v = lb[j - m][m]
            s -= v * v
        if s <= tol:
            return np.array(lb, dtype=np.float64), j
        piv = math.sqrt(s)
        lb[0][j] = piv
        for k in range(1, min(w, n - 1 - j) + 1):
            i = j + k
            s = a[k][j]
            for m in range(max(0, i - w), j):
                s -= lb[i - m][m] * lb[j - m][m]
            lb[k][j] = s / piv
    return np.array(lb, dtype=np.float64), -1


def forward(lb: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = lb.shape[0] - 1
    n = lb.shape[1]
    z = np.array(b, dtype=np.float64, copy=True)
    if z.shape[1] == 1:
        col = z[:, 0].tolist()
        ll = lb.tolist()
        for i in range(n):
            s = col[i]
            for m in range(max(0, i - w), i):
                s -= ll[i - m][m] * col[m]
            col[i] = s / ll[0][i]
        return np.array(col, dtype=np.float64).reshape(n, 1)
    for i in range(n):
        for m in range(max(0, i - w), i):
            z[i] -= lb[i - m, m] * z[m]
        z[i] /= lb[0, i]
    return z


def backward(lb: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = lb.shape[0] - 1
    n = lb.shape[1]
    x = np.array(b, dtype=np.float64, copy=True)
    if x.shape[1] == 1:
        col = x[:, 0].tolist()
        ll = lb.tolist()
        for i in range(n - 1, -1, -1):
            s = col[i]
            for k in range(i + 1, min(i + w + 1, n)):
                s -= ll[k - i][i] * col[k]
            col[i] = s / ll[0][i]
        return np.array(col, dtype=np.float64).reshape(n, 1)
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, min(i + w + 1, n)):
            x[i] -= lb[k - i, i] * x[k]
        x[i] /= lb[0, i]
    return x


def selinv(lb: np.ndarray) -> np.ndarray:
    w = lb.shape[0] - 1
    n = lb.shape[1]
    ll = lb.tolist()
    sb = [[0.0] * n for _ in range(w + 1)]
    for j in range(n - 1, -1, -1):
        ljj = ll[0][j]
        hi = min(j + w, n - 1)
        for i in range(hi, j, -1):
            s = 0.0
            for k in range(j + 1, hi + 1):
                if k <= i:
                    s += ll[k - j][j] * sb[i - k][k]
                else:
                    s += ll[k - j][j] * sb[k - i][i]
            sb[i - j][j] = -s / ljj
        s = 1.0 / ljj
        for k in range(j + 1, hi + 1):
            s -= ll[k - j][j] * sb[k - j][j]
        sb[0][j] = s / ljj
    return np.array(sb, dtype=np.float64)
