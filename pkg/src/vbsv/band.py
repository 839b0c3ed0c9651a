"""Banded symmetric positive-definite linear algebra.

Matrices are stored in LAPACK lower band layout: ``bands[k, j] = A[j + k, j]``
for ``k = 0..w``. Entries past the end of a band (``j >= T - k``) are zero.

The sequential kernels (Cholesky, triangular solves, selected inversion)
come from the compiled extension ``vbsv._bandcore`` when it is importable and
from ``vbsv._bandpy`` otherwise. Set ``VBSV_PURE_PYTHON=1`` to force the
fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from vbsv.errors import DimensionError, NotPositiveDefiniteError

from vbsv import _bandpy

if os.environ.get("VBSV_PURE_PYTHON", "") not in ("", "0"):
    _kernels = _bandpy
else:
    try:
        from vbsv import _bandcore as _kernels
    except ImportError:  # pragma: no cover - depends on the build
        _kernels = _bandpy

BACKEND = "compiled" if _kernels is not _bandpy else "python"

PIVOT_RTOL = 1e-13


def kernels(backend: str | None = None):
    """Return the kernel module for ``backend`` ('compiled', 'python' or None)."""
    if backend is None:
        return _kernels
    if backend == "python":
        return _bandpy
    if backend == "compiled":
        from vbsv import _bandcore

        return _bandcore
    raise ValueError(f"unknown band backend {backend!r}")


@dataclass(frozen=True)
class BandSymMatrix:
    """Symmetric matrix held by its ``w + 1`` lower bands."""

    bands: np.ndarray

    def __post_init__(self):
        b = np.ascontiguousarray(self.bands, dtype=np.float64)
        if b.ndim != 2 or b.shape[1] < 1:
            raise DimensionError(f"bands must be (w+1, T), got {b.shape}")
        b = b.copy()
        w = b.shape[0] - 1
        for k in range(1, w + 1):
            b[k, max(b.shape[1] - k, 0):] = 0.0
        b.setflags(write=False)
        object.__setattr__(self, "bands", b)

    @property
    def dim(self) -> int:
        return self.bands.shape[1]

    @property
    def bandwidth(self) -> int:
        return self.bands.shape[0] - 1

    @classmethod
    def from_dense(cls, a: np.ndarray, bandwidth: int) -> "BandSymMatrix":
        a = np.asarray(a, dtype=np.float64)
        n = a.shape[0]
        bands = np.zeros((bandwidth + 1, n))
        for k in range(bandwidth + 1):
            bands[k, : n - k] = np.diagonal(a, -k)
        return cls(bands)

    @classmethod
    def diagonal(cls, d) -> "BandSymMatrix":
        return cls(np.atleast_2d(np.asarray(d, dtype=np.float64)))

    @classmethod
    def identity(cls, n: int) -> "BandSymMatrix":
        return cls.diagonal(np.ones(n))

    def to_dense(self) -> np.ndarray:
        n, w = self.dim, self.bandwidth
        a = np.diag(self.bands[0].copy())
        for k in range(1, w + 1):
            off = self.bands[k, : n - k]
            a += np.diag(off, -k) + np.diag(off, k)
        return a

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        n = self.dim
        if x.shape[0] != n:
            raise DimensionError(f"vector length {x.shape[0]} != dim {n}")
        y = self.bands[0] * x if x.ndim == 1 else self.bands[0][:, None] * x
        for k in range(1, self.bandwidth + 1):
            off = self.bands[k, : n - k]
            if x.ndim == 1:
                y[k:] += off * x[: n - k]
                y[: n - k] += off * x[k:]
            else:
                y[k:] += off[:, None] * x[: n - k]
                y[: n - k] += off[:, None] * x[k:]
        return y

    def quad(self, x: np.ndarray) -> float:
        """``x' A x``."""
        return float(x @ self.matvec(x))

    def add_diagonal(self, d) -> "BandSymMatrix":
        b = self.bands.copy()
        b[0] += d
        return BandSymMatrix(b)

    def scale(self, c: float) -> "BandSymMatrix":
        return BandSymMatrix(self.bands * c)


@dataclass(frozen=True)
class BandCholeskyFactor:
    """Lower band factor ``L`` with ``A = L L'``."""

    bands: np.ndarray
    _selinv: list = field(default_factory=list, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.bands.shape[1]

    @property
    def bandwidth(self) -> int:
        return self.bands.shape[0] - 1

    def to_dense(self) -> np.ndarray:
        n = self.dim
        out = np.diag(self.bands[0].copy())
        for k in range(1, self.bandwidth + 1):
            out += np.diag(self.bands[k, : n - k], -k)
        return out

    def selected_inverse(self) -> np.ndarray:
        """In-band entries of ``A^{-1}`` in lower band layout (cached)."""
        if not self._selinv:
            self._selinv.append(_kernels.selinv(self.bands))
        return self._selinv[0]


def build_hth(T: int) -> BandSymMatrix:
    """``H'H`` for the ``T x T`` first-difference matrix ``H``.

    Diagonal ``(2, ..., 2, 1)``, first off-diagonal ``-1``.
    """
    if T < 1:
        raise DimensionError(f"T must be >= 1, got {T}")
    bands = np.zeros((2, T))
    bands[0] = 2.0
    bands[0, -1] = 1.0
    bands[1, : T - 1] = -1.0
    return BandSymMatrix(bands)


def band_cholesky(a: BandSymMatrix, backend: str | None = None) -> BandCholeskyFactor:
    """Band Cholesky factor of an SPD band matrix.

    Raises
    ------
    NotPositiveDefiniteError
        If a pivot falls to ``1e-13 * max(diag(A))`` or below.
    """
    tol = PIVOT_RTOL * max(float(np.max(a.bands[0])), 0.0)
    lb, info = kernels(backend).chol(a.bands, tol)
    if info >= 0:
        raise NotPositiveDefiniteError(info)
    return BandCholeskyFactor(lb)


def _as_columns(b: np.ndarray, n: int) -> tuple[np.ndarray, bool]:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != n:
        raise DimensionError(f"right-hand side has length {b.shape[0]}, expected {n}")
    if b.ndim == 1:
        return np.ascontiguousarray(b.reshape(n, 1)), True
    return np.ascontiguousarray(b), False


def band_solve(factor: BandCholeskyFactor, b, backend: str | None = None) -> np.ndarray:
    """Solve ``A x = b`` given the factor of ``A`` (``b`` may be 1-D or ``(T, r)``)."""
    k = kernels(backend)
    cols, flat = _as_columns(b, factor.dim)
    x = k.backward(factor.bands, k.forward(factor.bands, cols))
    return x[:, 0] if flat else x


def forward_solve(factor: BandCholeskyFactor, b, backend: str | None = None) -> np.ndarray:
    """Solve ``L z = b``."""
    cols, flat = _as_columns(b, factor.dim)
    z = kernels(backend).forward(factor.bands, cols)
    return z[:, 0] if flat else z


def backward_solve(factor: BandCholeskyFactor, b, backend: str | None = None) -> np.ndarray:
    """Solve ``L' x = b``; with standard normal ``b`` this draws from ``N(0, A^{-1})``."""
    cols, flat = _as_columns(b, factor.dim)
    x = kernels(backend).backward(factor.bands, cols)
    return x[:, 0] if flat else x


def band_selected_inverse(factor: BandCholeskyFactor, backend: str | None = None) -> np.ndarray:
    if backend is None:
        return factor.selected_inverse()
    return kernels(backend).selinv(factor.bands)


def band_inverse_diagonal(factor: BandCholeskyFactor, backend: str | None = None) -> np.ndarray:
    """``diag(A^{-1})`` by selected inversion; the dense inverse is never formed."""
    return band_selected_inverse(factor, backend)[0].copy()


def log_det(factor: BandCholeskyFactor) -> float:
    return 2.0 * float(np.sum(np.log(factor.bands[0])))


def trace_product(a: BandSymMatrix, factor: BandCholeskyFactor) -> float:
    """``tr(A B^{-1})`` where ``factor`` factors ``B`` and ``bw(A) <= bw(B)``."""
    s = factor.selected_inverse()
    if a.bandwidth > factor.bandwidth:
        raise DimensionError("trace_product needs bandwidth(A) <= bandwidth(B)")
    total = float(a.bands[0] @ s[0])
    for k in range(1, a.bandwidth + 1):
        total += 2.0 * float(a.bands[k] @ s[k])
    return total
