"""Gaussian approximations to the optimal log-volatility density.

Given the expected squared residuals ``s2``, ``c = E[1/sigma_h^2]`` and the
initial state mean ``h0``, the unnormalized target over ``h = (h_1..h_T)`` is

    log q(h) = -1/2 sum(h) - 1/2 sum(s2 * exp(-h)) - c/2 (h - h0)' H'H (h - h0)

Three Gaussian approximations are built here:

* ``approx_logchi2``: exact posterior of the linearized model
  ``log r_t^2 = h_t + e_t`` with ``e_t ~ N(-1.27, pi^2/4)``;
* ``approx_taylor``: second-order expansion at the mode (Laplace);
* ``approx_global``: the member of ``{N(m, K^{-1}) : m}`` (``K`` the negative
  Hessian at the mode) with the smallest KL divergence to the target. The
  objective is convex in ``m`` and solved by Newton's method on band systems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from vbsv.band import (
    BandCholeskyFactor,
    BandSymMatrix,
    band_cholesky,
    band_solve,
    backward_solve,
    build_hth,
    log_det,
    trace_product,
)
from vbsv.errors import DimensionError, IterationLimitError

S2_FLOOR = 1e-10
LOGCHI2_MEAN = -1.27
LOGCHI2_VAR = math.pi**2 / 4.0
Y_STAR_OFFSET = 1e-10
MAX_HALVINGS = 20


@dataclass(frozen=True)
class SVTarget:
    s_hat2: np.ndarray
    e_inv_sigma2: float
    h0_hat: float
    hth: BandSymMatrix = field(default=None, repr=False)

    def __post_init__(self):
        s2 = np.asarray(self.s_hat2, dtype=np.float64)
        if s2.ndim != 1 or s2.size < 1:
            raise DimensionError("s_hat2 must be a non-empty vector")
        if np.any(s2 < 0):
            raise ValueError("s_hat2 entries must be non-negative")
        if not self.e_inv_sigma2 > 0:
            raise ValueError("E[1/sigma_h^2] must be positive")
        object.__setattr__(self, "s_hat2", s2)
        object.__setattr__(self, "e_inv_sigma2", float(self.e_inv_sigma2))
        object.__setattr__(self, "h0_hat", float(self.h0_hat))
        if self.hth is None:
            object.__setattr__(self, "hth", build_hth(s2.size))
        elif self.hth.dim != s2.size:
            raise DimensionError("H'H dimension does not match s_hat2")

    @property
    def T(self) -> int:
        return self.s_hat2.size

    def prior_quad(self, h: np.ndarray) -> float:
        dev = h - self.h0_hat
        return self.hth.quad(dev)

    def prior_grad(self, h: np.ndarray) -> np.ndarray:
        return self.e_inv_sigma2 * self.hth.matvec(h - self.h0_hat)


class GaussianApprox:
    """``N(mean, precision^{-1})`` with a tridiagonal precision."""

    def __init__(self, mean, precision: BandSymMatrix, factor: BandCholeskyFactor | None = None,
                 iterations: int = 0, mode_iterations: int = 0):
        self.mean = np.asarray(mean, dtype=np.float64)
        if self.mean.shape != (precision.dim,):
            raise DimensionError("mean and precision sizes differ")
        self.precision = precision
        self.factor = factor if factor is not None else band_cholesky(precision)
        self.iterations = iterations
        self.mode_iterations = mode_iterations

    @property
    def T(self) -> int:
        return self.mean.size

    @property
    def inv_diag(self) -> np.ndarray:
        return self.factor.selected_inverse()[0]

    @property
    def inv_offdiag(self) -> np.ndarray:
        """First sub-diagonal of the covariance (length ``T - 1``)."""
        s = self.factor.selected_inverse()
        if s.shape[0] < 2:
            return np.zeros(self.T - 1)
        return s[1, : self.T - 1]

    @property
    def log_det_precision(self) -> float:
        return log_det(self.factor)

    def trace_with(self, a: BandSymMatrix) -> float:
        """``tr(A precision^{-1})``."""
        return trace_product(a, self.factor)

    def log_density(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        dev = (h - self.mean).T
        flat = dev.ndim == 1
        if flat:
            dev = dev[:, None]
        q = np.einsum("ij,ij->j", dev, self.precision.matvec(dev))
        out = -0.5 * self.T * math.log(2 * math.pi) + 0.5 * self.log_det_precision - 0.5 * q
        return out[0] if flat else out

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        if size is None:
            return self.mean + backward_solve(self.factor, rng.standard_normal(self.T))
        eps = rng.standard_normal((self.T, size))
        return (self.mean[:, None] + backward_solve(self.factor, eps)).T


def target_log_kernel(t: SVTarget, h) -> float:
    """Log of the unnormalized target (additive constant omitted)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (t.T,):
        raise DimensionError(f"h has shape {h.shape}, expected ({t.T},)")
    with np.errstate(over="ignore"):
        e = float(t.s_hat2 @ np.exp(-h))
    return -0.5 * float(np.sum(h)) - 0.5 * e - 0.5 * t.e_inv_sigma2 * t.prior_quad(h)


def target_gradient(t: SVTarget, h: np.ndarray) -> np.ndarray:
    return -0.5 + 0.5 * t.s_hat2 * np.exp(-h) - t.prior_grad(h)


def _curvature(t: SVTarget, w: np.ndarray) -> BandSymMatrix:
    """``c H'H + diag(w / 2)``."""
    bands = t.hth.bands * t.e_inv_sigma2
    bands[0] += 0.5 * w
    return BandSymMatrix(bands)


def smoothed_log(x: np.ndarray, width: int = 5) -> np.ndarray:
    """Log of a centred moving average (window shrinks at the edges)."""
    x = np.asarray(x, dtype=np.float64)
    half = width // 2
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(x.size)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, x.size)
    avg = (c[hi] - c[lo]) / (hi - lo)
    return np.log(np.maximum(avg, S2_FLOOR))


def _converged_step(step: np.ndarray, x: np.ndarray) -> bool:
    return float(np.max(np.abs(step))) <= 1e-13 * (1.0 + float(np.max(np.abs(x))))


class ModeResult(NamedTuple):
    mode: np.ndarray
    K_hat: BandSymMatrix
    factor: BandCholeskyFactor
    iterations: int


def find_mode(t: SVTarget, h_init=None, tol: float = 1e-8, max_iter: int = 100):
    """Mode of the target and the negative Hessian there.

    Newton-Raphson with band solves and step halving. ``K_hat`` is
    ``c H'H + diag(s2 * exp(-mode) / 2)``; entries of ``s2`` below ``1e-10``
    are floored first.
    """
    s2 = np.maximum(t.s_hat2, S2_FLOOR)
    tf = SVTarget(s2, t.e_inv_sigma2, t.h0_hat, t.hth)
    h = smoothed_log(s2) if h_init is None else np.array(h_init, dtype=np.float64)
    f = target_log_kernel(tf, h)
    for it in range(1, max_iter + 1):
        w = s2 * np.exp(-h)
        grad = -0.5 + 0.5 * w - tf.prior_grad(h)
        K = _curvature(tf, w)
        L = band_cholesky(K)
        if float(np.max(np.abs(grad))) <= tol:
            return ModeResult(h, K, L, it - 1)
        step = band_solve(L, grad)
        if _converged_step(step, h):
            return ModeResult(h, K, L, it - 1)
        for _ in range(MAX_HALVINGS):
            h_new = h + step
            f_new = target_log_kernel(tf, h_new)
            if f_new >= f - 1e-12 * (1.0 + abs(f)):
                break
            step *= 0.5
        else:
            raise IterationLimitError("mode search line search failed", last=h,
                                      diagnostics={"iteration": it, "grad_max": float(np.max(np.abs(grad)))})
        h, f = h_new, f_new
    raise IterationLimitError(f"mode search did not converge in {max_iter} iterations", last=h,
                              diagnostics={"grad_max": float(np.max(np.abs(grad)))})


def approx_taylor(t: SVTarget, h_init=None, tol: float = 1e-8, max_iter: int = 100) -> GaussianApprox:
    mode, K, L, it = find_mode(t, h_init, tol, max_iter)
    return GaussianApprox(mode, K, L, iterations=0, mode_iterations=it)


def approx_logchi2(y_star, e_inv_sigma2: float, h0_hat: float) -> GaussianApprox:
    """Posterior of ``h`` under ``y*_t = h_t + e_t``, ``e_t ~ N(-1.27, pi^2/4)``."""
    y_star = np.asarray(y_star, dtype=np.float64)
    if y_star.ndim != 1 or y_star.size < 1:
        raise DimensionError("y_star must be a non-empty vector")
    T = y_star.size
    obs_prec = 1.0 / LOGCHI2_VAR
    hth = build_hth(T)
    bands = hth.bands * e_inv_sigma2
    bands[0] += obs_prec
    K = BandSymMatrix(bands)
    L = band_cholesky(K)
    rhs = obs_prec * (y_star - LOGCHI2_MEAN)
    # H'H 1 = e_1, so the prior pulls only on the first state
    rhs[0] += e_inv_sigma2 * h0_hat
    return GaussianApprox(band_solve(L, rhs), K, L)


def y_star_from_residuals(resid) -> np.ndarray:
    r = np.asarray(resid, dtype=np.float64)
    return np.log(r * r + Y_STAR_OFFSET)


def _inv_diag(k_hat) -> np.ndarray:
    if isinstance(k_hat, GaussianApprox):
        return k_hat.inv_diag
    if isinstance(k_hat, BandCholeskyFactor):
        return k_hat.selected_inverse()[0]
    if isinstance(k_hat, BandSymMatrix):
        return band_cholesky(k_hat).selected_inverse()[0]
    d = np.asarray(k_hat, dtype=np.float64)
    if d.ndim != 1:
        raise TypeError("k_hat must be a band matrix, factor, GaussianApprox or inverse diagonal")
    return d


def kl_objective(t: SVTarget, k_hat, m) -> float:
    """``E_f[log f/q]`` over ``f = N(m, K^{-1})`` up to an additive constant.

    ``k_hat`` may be the precision, its factor, a ``GaussianApprox`` or the
    precomputed diagonal of ``K^{-1}``.
    """
    d = _inv_diag(k_hat)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (t.T,) or d.shape != (t.T,):
        raise DimensionError("dimension mismatch in kl_objective")
    with np.errstate(over="ignore"):
        e = float(t.s_hat2 @ np.exp(-m + 0.5 * d))
    return 0.5 * (float(np.sum(m)) + e + t.e_inv_sigma2 * t.prior_quad(m))


def kl_gradient(t: SVTarget, k_hat, m) -> np.ndarray:
    d = _inv_diag(k_hat)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (t.T,):
        raise DimensionError("dimension mismatch in kl_gradient")
    return t.prior_grad(m) + 0.5 * (1.0 - t.s_hat2 * np.exp(-m + 0.5 * d))


def kl_hessian(t: SVTarget, k_hat, m) -> BandSymMatrix:
    d = _inv_diag(k_hat)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (t.T,):
        raise DimensionError("dimension mismatch in kl_hessian")
    return _curvature(t, t.s_hat2 * np.exp(-m + 0.5 * d))


def optimize_mean(t: SVTarget, k_hat, m_init, tol: float = 1e-8, max_iter: int = 100):
    """Newton minimization of :func:`kl_objective` over ``m`` for fixed ``K``.

    Returns ``(m, iterations)``.
    """
    d = _inv_diag(k_hat)
    s2d = t.s_hat2 * np.exp(0.5 * d)
    m = np.array(m_init, dtype=np.float64)

    def obj(x):
        with np.errstate(over="ignore"):
            e = float(s2d @ np.exp(-x))
        return 0.5 * (float(np.sum(x)) + e + t.e_inv_sigma2 * t.prior_quad(x))

    f = obj(m)
    for it in range(1, max_iter + 1):
        w = s2d * np.exp(-m)
        grad = t.prior_grad(m) + 0.5 * (1.0 - w)
        if float(np.max(np.abs(grad))) <= tol:
            return m, it - 1
        step = band_solve(band_cholesky(_curvature(t, w)), grad)
        if _converged_step(step, m):
            return m, it - 1
        for _ in range(MAX_HALVINGS):
            m_new = m - step
            f_new = obj(m_new)
            if f_new <= f + 1e-12 * (1.0 + abs(f)):
                break
            step *= 0.5
        else:
            raise IterationLimitError("KL mean line search failed", last=m,
                                      diagnostics={"iteration": it, "grad_max": float(np.max(np.abs(grad)))})
        m, f = m_new, f_new
    raise IterationLimitError(f"KL mean search did not converge in {max_iter} iterations", last=m,
                              diagnostics={"grad_max": float(np.max(np.abs(grad)))})


def approx_global(t: SVTarget, h_init=None, tol: float = 1e-8, max_iter: int = 100) -> GaussianApprox:
    """KL-optimal mean with the precision fixed at the negative Hessian at the mode."""
    mode, K, L, mode_it = find_mode(t, h_init, tol, max_iter)
    m, it = optimize_mean(t, L, mode, tol, max_iter)
    return GaussianApprox(m, K, L, iterations=it, mode_iterations=mode_it)
