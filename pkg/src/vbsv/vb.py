"""Mean-field variational Bayes for one equation and for the whole VAR.

Each equation carries ``q(theta) q(h_0) q(sigma_h^2) q(h)`` with Gaussian
``q(theta)``, ``q(h_0)``, inverse-gamma ``q(sigma_h^2)`` and a Gaussian
``q(h)`` chosen by one of the approximations in :mod:`vbsv.svapprox`.
Updates cycle in the order h, theta, sigma_h^2, h_0.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import digamma, gammaln

from vbsv import svapprox
from vbsv.band import build_hth
from vbsv.errors import FitError, NotPositiveDefiniteError
from vbsv.model import LOG_2PI, Dataset, EquationData, StructuralVAR, build_equation_data, to_reduced_form
from vbsv.prior import MinnesotaHyper, PriorSpec, ar4_residual_variances, build_prior
from vbsv.svapprox import GaussianApprox, SVTarget

logger = logging.getLogger(__name__)

SV_METHODS = ("logchi2", "taylor", "global", "homoscedastic")
ELBO_SLACK = 1e-8
MONOTONE_METHODS = ("global", "homoscedastic")


class ELBODecreaseWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-6
    max_iter: int = 100
    sv_method: str = "global"
    newton_tol: float = 1e-8
    newton_max_iter: int = 100

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.sv_method not in SV_METHODS:
            raise ValueError(f"sv_method must be one of {SV_METHODS}, got {self.sv_method!r}")


@dataclass(frozen=True)
class ThetaPosterior:
    """``N(theta_hat, K^{-1})`` with ``K`` kept alongside its Cholesky factor."""

    mean: np.ndarray
    precision: np.ndarray
    chol: np.ndarray  # lower, K = chol chol'

    @property
    def k(self) -> int:
        return self.mean.shape[0]

    def log_det_precision(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol)))) if self.k else 0.0

    def cov_diag(self) -> np.ndarray:
        if not self.k:
            return np.zeros(0)
        Linv = solve_triangular(self.chol, np.eye(self.k), lower=True)
        return np.sum(Linv * Linv, axis=0)

    def quad_rows(self, X: np.ndarray) -> np.ndarray:
        """``x_t K^{-1} x_t'`` for every row of ``X``."""
        if not self.k:
            return np.zeros(X.shape[0])
        Z = solve_triangular(self.chol, X.T, lower=True)
        return np.sum(Z * Z, axis=0)


def _theta_posterior(precision: np.ndarray, rhs: np.ndarray) -> ThetaPosterior:
    k = precision.shape[0]
    if k == 0:
        return ThetaPosterior(np.zeros(0), precision, np.zeros((0, 0)))
    try:
        c, _ = cho_factor(precision, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(-1, "theta precision is not positive definite") from exc
    chol = np.tril(c)
    return ThetaPosterior(cho_solve((c, True), rhs), precision, chol)


@dataclass(frozen=True)
class VariationalState:
    theta: ThetaPosterior
    h0_hat: float
    K_h0: float
    nu_hat: float
    S_hat: float
    h_approx: GaussianApprox | None

    @property
    def theta_hat(self) -> np.ndarray:
        return self.theta.mean

    @property
    def K_theta(self) -> np.ndarray:
        return self.theta.precision

    @property
    def e_inv_sigma2(self) -> float:
        return self.nu_hat / self.S_hat


@dataclass
class FitResult:
    state: VariationalState
    elbo_trace: list[float]
    iterations: int
    converged: bool
    method: str
    max_decrease: float = 0.0

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1]


# ------------------------------------------------------------------ updates

def compute_shat2(eq: EquationData, theta_hat, K_theta=None) -> np.ndarray:
    """``(y_t - x_t theta)^2 + x_t K^{-1} x_t'``.

    ``K_theta`` may be a precision matrix, a :class:`ThetaPosterior`, or None
    for a point mass.
    """
    r = eq.y - eq.X @ np.asarray(theta_hat)
    out = r * r
    if K_theta is None:
        return out
    if isinstance(K_theta, ThetaPosterior):
        return out + K_theta.quad_rows(eq.X)
    K = np.asarray(K_theta, dtype=np.float64)
    if K.size == 0:
        return out
    return out + np.einsum("tj,jt->t", eq.X, np.linalg.solve(K, eq.X.T))


def update_theta(eq: EquationData, o_hat, prior: PriorSpec) -> ThetaPosterior:
    """``K = V^{-1} + X' O X``, ``theta = K^{-1}(V^{-1} theta0 + X' O y)``."""
    o = np.asarray(o_hat, dtype=np.float64)
    vinv = 1.0 / prior.V_theta_diag
    XO = eq.X * o[:, None]
    K = XO.T @ eq.X
    K[np.diag_indices_from(K)] += vinv
    return _theta_posterior(K, vinv * prior.theta0 + XO.T @ eq.y)


def update_h0(h1_hat: float, e_inv_sigma2: float, V_h0: float) -> tuple[float, float]:
    K = 1.0 / V_h0 + e_inv_sigma2
    return e_inv_sigma2 * h1_hat / K, K


def expected_rw_quad(h_approx: GaussianApprox, h0_hat: float, K_h0: float, hth=None) -> float:
    """``E[(h - h0 1)' H'H (h - h0 1)]`` under ``q(h) q(h_0)``."""
    hth = hth if hth is not None else build_hth(h_approx.T)
    dev = h_approx.mean - h0_hat
    return hth.quad(dev) + h_approx.trace_with(hth) + 1.0 / K_h0


def update_sigma_h2(h_approx: GaussianApprox, h0_hat: float, K_h0: float,
                    prior: PriorSpec, hth=None) -> tuple[float, float, float]:
    """Returns ``(nu_hat, S_hat, E[1/sigma_h^2])``."""
    nu_hat = prior.nu + 0.5 * h_approx.T
    S_hat = prior.S + 0.5 * expected_rw_quad(h_approx, h0_hat, K_h0, hth)
    return nu_hat, S_hat, nu_hat / S_hat


def o_weights(h_approx: GaussianApprox) -> np.ndarray:
    """``E[exp(-h_t)] = exp(-m_t + d_t / 2)``."""
    return np.exp(-h_approx.mean + 0.5 * h_approx.inv_diag)


def update_h(eq: EquationData, state: VariationalState, prior: PriorSpec, sv_method: str,
             h_init=None, tol: float = 1e-8, max_iter: int = 100, hth=None) -> GaussianApprox:
    """New ``q(h)`` from the current theta, sigma_h^2 and h_0 factors."""
    e_inv = state.e_inv_sigma2
    if sv_method == "logchi2":
        resid = eq.y - eq.X @ state.theta_hat
        return svapprox.approx_logchi2(svapprox.y_star_from_residuals(resid), e_inv, state.h0_hat)
    target = SVTarget(compute_shat2(eq, state.theta_hat, state.theta), e_inv, state.h0_hat, hth)
    if sv_method == "taylor":
        return svapprox.approx_taylor(target, h_init, tol, max_iter)
    if sv_method == "global":
        return svapprox.approx_global(target, h_init, tol, max_iter)
    raise ValueError(f"update_h does not handle sv_method {sv_method!r}")


def elbo(eq: EquationData, state: VariationalState, prior: PriorSpec, hth=None) -> float:
    """Variational lower bound ``E_q[log p(y, params) - log q]`` for one equation.

    Evaluated term by term, so it is valid for any state. At a state where
    ``K_theta``, ``S_hat`` are consistent with the other factors it equals
    :func:`elbo_closed_form`.
    """
    T, k = eq.T, eq.k
    ha = state.h_approx
    th = state.theta
    s2 = compute_shat2(eq, th.mean, th)
    e_inv = state.e_inv_sigma2
    e_log = math.log(state.S_hat) - float(digamma(state.nu_hat))
    vinv = 1.0 / prior.V_theta_diag
    dth = th.mean - prior.theta0

    ll_y = -0.5 * T * LOG_2PI - 0.5 * float(np.sum(ha.mean)) - 0.5 * float(o_weights(ha) @ s2)
    ll_h = (-0.5 * T * LOG_2PI - 0.5 * T * e_log
            - 0.5 * e_inv * expected_rw_quad(ha, state.h0_hat, state.K_h0, hth))
    lp_theta = (-0.5 * k * LOG_2PI - 0.5 * float(np.sum(np.log(prior.V_theta_diag)))
                - 0.5 * float(vinv @ (dth * dth)) - 0.5 * float(vinv @ th.cov_diag()))
    lp_h0 = (-0.5 * LOG_2PI - 0.5 * math.log(prior.V_h0)
             - (state.h0_hat**2 + 1.0 / state.K_h0) / (2.0 * prior.V_h0))
    lp_sig = prior.nu * math.log(prior.S) - float(gammaln(prior.nu)) - (prior.nu + 1) * e_log - prior.S * e_inv
    ent_theta = 0.5 * k * (1.0 + LOG_2PI) - 0.5 * th.log_det_precision()
    ent_h0 = 0.5 * (1.0 + LOG_2PI) - 0.5 * math.log(state.K_h0)
    ent_h = 0.5 * T * (1.0 + LOG_2PI) - 0.5 * ha.log_det_precision
    ent_sig = (state.nu_hat + math.log(state.S_hat) + float(gammaln(state.nu_hat))
               - (1.0 + state.nu_hat) * float(digamma(state.nu_hat)))
    return ll_y + ll_h + lp_theta + lp_h0 + lp_sig + ent_theta + ent_h0 + ent_h + ent_sig


def elbo_closed_form(eq: EquationData, state: VariationalState, prior: PriorSpec) -> float:
    """The simplified bound that assumes every factor is at its coordinate optimum
    given the others (``K_theta`` built from the current ``q(h)``, ``S_hat`` from
    the current ``q(h)``, ``q(h_0)``)."""
    T = eq.T
    ha, th = state.h_approx, state.theta
    c = (-0.5 * T * LOG_2PI - 0.5 * math.log(prior.V_h0)
         - 0.5 * float(np.sum(np.log(prior.V_theta_diag)))
         + prior.nu * math.log(prior.S) - float(gammaln(prior.nu))
         - 0.5 * ha.log_det_precision - 0.5 * th.log_det_precision() - 0.5 * math.log(state.K_h0)
         - state.nu_hat * math.log(state.S_hat) + float(gammaln(state.nu_hat)))
    r = eq.y - eq.X @ th.mean
    dth = th.mean - prior.theta0
    return (c - 0.5 * float(np.sum(ha.mean)) - 0.5 * float(o_weights(ha) @ (r * r))
            - (state.h0_hat**2 + 1.0 / state.K_h0) / (2.0 * prior.V_h0)
            - 0.5 * float(dth @ (dth / prior.V_theta_diag)) + 0.5 * (T + 1))


# ------------------------------------------------------------------ drivers

def initial_state(eq: EquationData, prior: PriorSpec) -> tuple[VariationalState, np.ndarray]:
    """Ridge theta under unit volatility, smoothed-log volatility, prior-mean precision."""
    th = update_theta(eq, np.ones(eq.T), prior)
    r = eq.y - eq.X @ th.mean
    h_init = svapprox.smoothed_log(r * r)
    nu_hat = prior.nu + 0.5 * eq.T
    S_hat = prior.S * nu_hat / prior.nu
    h0 = float(h_init[0])
    K_h0 = 1.0 / prior.V_h0 + nu_hat / S_hat
    return VariationalState(th, h0, K_h0, nu_hat, S_hat, None), h_init


def cycle(eq: EquationData, state: VariationalState, prior: PriorSpec, options: FitOptions,
          h_init=None, hth=None) -> VariationalState:
    """One pass of the coordinate updates (h, theta, sigma_h^2, h_0)."""
    ha = update_h(eq, state, prior, options.sv_method, h_init,
                  options.newton_tol, options.newton_max_iter, hth)
    th = update_theta(eq, o_weights(ha), prior)
    nu_hat, S_hat, e_inv = update_sigma_h2(ha, state.h0_hat, state.K_h0, prior, hth)
    h0, K_h0 = update_h0(float(ha.mean[0]), e_inv, prior.V_h0)
    return VariationalState(th, h0, K_h0, nu_hat, S_hat, ha)


def fit_equation(eq: EquationData, prior: PriorSpec, options: FitOptions | None = None) -> FitResult:
    """Coordinate-ascent VB for one equation until the ELBO gain drops below ``tol``."""
    options = options or FitOptions()
    if options.sv_method == "homoscedastic":
        return fit_homoscedastic_equation(eq, prior, options)
    hth = build_hth(eq.T)
    state, h_start = initial_state(eq, prior)
    trace: list[float] = []
    converged = False
    max_drop = 0.0
    it = 0
    for it in range(1, options.max_iter + 1):
        try:
            state = cycle(eq, state, prior, options, h_start, hth)
        except Exception as exc:
            raise FitError(f"equation {eq.i}: update failed at iteration {it}: {exc}",
                           {"equation": eq.i, "iteration": it}) from exc
        if options.sv_method != "logchi2":
            # warm start the next mode search from this one
            h_start = _mode_hint(state.h_approx)
        value = elbo(eq, state, prior, hth)
        if trace:
            gain = value - trace[-1]
            if gain < 0:
                max_drop = max(max_drop, -gain)
                if -gain > ELBO_SLACK and options.sv_method in MONOTONE_METHODS:
                    warnings.warn(
                        f"equation {eq.i}: ELBO fell by {-gain:.3e} at iteration {it}",
                        ELBODecreaseWarning, stacklevel=2,
                    )
                elif -gain > ELBO_SLACK:
                    # the logchi2 and taylor steps do not maximize the bound, so drops are expected
                    logger.info("equation %d (%s): ELBO fell by %.3e", eq.i, options.sv_method, -gain)
                else:
                    logger.debug("equation %d: ELBO fell by %.3e (within slack)", eq.i, -gain)
            trace.append(value)
            if gain < options.tol:
                converged = True
                break
        else:
            trace.append(value)
    return FitResult(state, trace, it, converged, options.sv_method, max_drop)


def _mode_hint(ha: GaussianApprox) -> np.ndarray:
    return ha.mean


# -------------------------------------------------------------- homoscedastic

@dataclass(frozen=True)
class HomoscedasticState:
    theta: ThetaPosterior
    nu_hat: float
    S_hat: float
    known_variance: float | None = None

    @property
    def theta_hat(self) -> np.ndarray:
        return self.theta.mean

    @property
    def K_theta(self) -> np.ndarray:
        return self.theta.precision

    @property
    def e_inv_sigma2(self) -> float:
        if self.known_variance is not None:
            return 1.0 / self.known_variance
        return self.nu_hat / self.S_hat

    @property
    def e_log_sigma2(self) -> float:
        if self.known_variance is not None:
            return math.log(self.known_variance)
        return math.log(self.S_hat) - float(digamma(self.nu_hat))


def _homo_theta(eq: EquationData, prior: PriorSpec, e_inv: float, conjugate: bool) -> ThetaPosterior:
    vinv = 1.0 / prior.V_theta_diag
    if conjugate:
        A = eq.X.T @ eq.X
        A[np.diag_indices_from(A)] += vinv
        base = _theta_posterior(A, vinv * prior.theta0 + eq.X.T @ eq.y)
        return ThetaPosterior(base.mean, e_inv * A, base.chol * math.sqrt(e_inv))
    K = e_inv * (eq.X.T @ eq.X)
    K[np.diag_indices_from(K)] += vinv
    return _theta_posterior(K, vinv * prior.theta0 + e_inv * (eq.X.T @ eq.y))


def homoscedastic_elbo(eq: EquationData, state: HomoscedasticState, prior: PriorSpec,
                       conjugate: bool = False) -> float:
    T, k = eq.T, eq.k
    th = state.theta
    s2 = compute_shat2(eq, th.mean, th)
    e_inv, e_log = state.e_inv_sigma2, state.e_log_sigma2
    vinv = 1.0 / prior.V_theta_diag
    dth = th.mean - prior.theta0
    prior_quad = float(vinv @ (dth * dth)) + float(vinv @ th.cov_diag())
    ll_y = -0.5 * T * (LOG_2PI + e_log) - 0.5 * e_inv * float(np.sum(s2))
    lp_theta = -0.5 * k * LOG_2PI - 0.5 * float(np.sum(np.log(prior.V_theta_diag)))
    if conjugate:
        lp_theta += -0.5 * k * e_log - 0.5 * e_inv * prior_quad
    else:
        lp_theta += -0.5 * prior_quad
    ent_theta = 0.5 * k * (1.0 + LOG_2PI) - 0.5 * th.log_det_precision()
    total = ll_y + lp_theta + ent_theta
    if state.known_variance is None:
        lp_sig = (prior.nu_y * math.log(prior.S_y) - float(gammaln(prior.nu_y))
                  - (prior.nu_y + 1) * e_log - prior.S_y * e_inv)
        ent_sig = (state.nu_hat + math.log(state.S_hat) + float(gammaln(state.nu_hat))
                   - (1.0 + state.nu_hat) * float(digamma(state.nu_hat)))
        total += lp_sig + ent_sig
    return total


def fit_homoscedastic_equation(eq: EquationData, prior: PriorSpec, options: FitOptions | None = None,
                               known_variance: float | None = None,
                               conjugate: bool = False) -> FitResult:
    """VB for the constant-variance regression with ``sigma^2 ~ IG(nu_y, S_y)``.

    ``known_variance`` fixes ``sigma^2`` (``q(sigma^2)`` a point mass), in
    which case ``q(theta)`` is the exact posterior. ``conjugate=True`` scales
    the coefficient prior by ``sigma^2`` (normal-inverse-gamma prior).
    """
    options = options or FitOptions(sv_method="homoscedastic")
    T, k = eq.T, eq.k
    nu_hat = prior.nu_y + 0.5 * T + (0.5 * k if conjugate else 0.0)
    state = HomoscedasticState(_homo_theta(eq, prior, 1.0 if known_variance is None else 1.0 / known_variance,
                                           conjugate),
                               nu_hat, prior.S_y * nu_hat / prior.nu_y, known_variance)
    trace: list[float] = []
    converged = False
    max_drop = 0.0
    it = 0
    vinv = 1.0 / prior.V_theta_diag
    for it in range(1, options.max_iter + 1):
        th = _homo_theta(eq, prior, state.e_inv_sigma2, conjugate)
        S_hat = state.S_hat
        if known_variance is None:
            S_hat = prior.S_y + 0.5 * float(np.sum(compute_shat2(eq, th.mean, th)))
            if conjugate:
                dth = th.mean - prior.theta0
                S_hat += 0.5 * (float(vinv @ (dth * dth)) + float(vinv @ th.cov_diag()))
        state = replace(state, theta=th, S_hat=S_hat)
        value = homoscedastic_elbo(eq, state, prior, conjugate)
        if trace:
            gain = value - trace[-1]
            if gain < 0:
                max_drop = max(max_drop, -gain)
                if -gain > ELBO_SLACK:
                    warnings.warn(f"equation {eq.i}: ELBO fell by {-gain:.3e}", ELBODecreaseWarning,
                                  stacklevel=2)
            trace.append(value)
            if gain < options.tol:
                converged = True
                break
        else:
            trace.append(value)
            if known_variance is not None:
                converged = True
                break
    return FitResult(state, trace, it, converged, "homoscedastic", max_drop)


# ------------------------------------------------------------------ whole VAR

@dataclass
class VARFit:
    data: Dataset
    p: int
    hyper: MinnesotaHyper
    priors: list[PriorSpec]
    results: list[FitResult]
    options: FitOptions

    @property
    def n(self) -> int:
        return len(self.results)

    @property
    def total_elbo(self) -> float:
        return float(sum(r.elbo for r in self.results))

    @property
    def time_index(self) -> tuple:
        return self.data.time_index[self.p:]

    def log_vol(self) -> np.ndarray:
        """``(T - p, n)`` posterior means of the log-volatilities.

        Homoscedastic equations report ``log(1 / E[1/sigma^2])`` at every date.
        """
        T = self.data.T - self.p
        out = np.empty((T, self.n))
        for r, res in enumerate(self.results):
            st = res.state
            if isinstance(st, HomoscedasticState):
                out[:, r] = -math.log(st.e_inv_sigma2)
            else:
                out[:, r] = st.h_approx.mean
        return out

    def structural(self) -> StructuralVAR:
        thetas = [r.state.theta_hat for r in self.results]
        h0 = [getattr(r.state, "h0_hat", 0.0) for r in self.results]
        s2 = [r.state.S_hat / (r.state.nu_hat - 1.0) if not isinstance(r.state, HomoscedasticState) else 0.0
              for r in self.results]
        return StructuralVAR.from_thetas(thetas, self.p, h0=h0, sigma_h2=s2, h_paths=self.log_vol())

    def reduced_form(self):
        return to_reduced_form(self.structural())


def equation_priors(data: Dataset, hyper: MinnesotaHyper, p: int, level_data: bool = False,
                    **prior_kwargs) -> list[PriorSpec]:
    s2 = ar4_residual_variances(data)
    return [build_prior(i, hyper, s2, p, level_data, **prior_kwargs) for i in range(1, data.n + 1)]


def fit_var(data: Dataset, hyper: MinnesotaHyper, p: int, options: FitOptions | None = None,
            level_data: bool = False, jobs: int = 1, order: Sequence[int] | None = None,
            priors: list[PriorSpec] | None = None, **prior_kwargs) -> VARFit:
    """Fit every equation independently; the total ELBO is the sum over equations.

    ``order`` only changes the processing order (results are identical).
    """
    options = options or FitOptions()
    priors = priors or equation_priors(data, hyper, p, level_data, **prior_kwargs)
    n = data.n
    order = list(order) if order is not None else list(range(1, n + 1))
    if sorted(order) != list(range(1, n + 1)):
        raise ValueError("order must be a permutation of 1..n")

    def run(i: int) -> FitResult:
        eq = build_equation_data(data, i, p)
        try:
            return fit_equation(eq, priors[i - 1], options)
        except FitError:
            raise
        except Exception as exc:
            raise FitError(f"equation {i} failed: {exc}", {"equation": i}) from exc

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as ex:
            done = dict(zip(order, ex.map(run, order)))
    else:
        done = {i: run(i) for i in order}
    results = [done[i] for i in range(1, n + 1)]
    return VARFit(data, p, hyper, priors, results, options)
