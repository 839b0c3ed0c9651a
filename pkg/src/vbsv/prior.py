"""Minnesota-type shrinkage priors and the hyperparameter grid search."""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vbsv.errors import FitError, SingularRegressionError
from vbsv.model import Dataset, lagged_regressors

logger = logging.getLogger(__name__)

DEFAULT_KAPPA1 = (0.01, 0.04, 0.16, 0.64)
DEFAULT_KAPPA2 = (0.0001, 0.001, 0.01, 0.1)


class DegenerateSeriesWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class MinnesotaHyper:
    kappa1: float
    kappa2: float

    def __post_init__(self):
        if not (self.kappa1 > 0 and self.kappa2 > 0):
            raise ValueError(f"shrinkage hyperparameters must be positive: {self}")


@dataclass(frozen=True)
class PriorSpec:
    """Prior for one equation.

    ``theta ~ N(theta0, diag(V_theta_diag))``, ``h_0 ~ N(0, V_h0)``,
    ``sigma_h^2 ~ IG(nu, S)``. ``nu_y`` and ``S_y`` parametrize the
    inverse-gamma prior on the constant error variance used only by the
    homoscedastic fit.
    """

    theta0: np.ndarray
    V_theta_diag: np.ndarray
    V_h0: float = 10.0
    nu: float = 5.0
    S: float = 0.16
    nu_y: float = 3.0
    S_y: float = 2.0

    def __post_init__(self):
        v = np.asarray(self.V_theta_diag, dtype=np.float64)
        if np.any(v <= 0) or self.V_h0 <= 0 or self.S <= 0 or self.S_y <= 0:
            raise ValueError("prior variances and scales must be positive")
        if self.nu <= 1 or self.nu_y <= 1:
            raise ValueError("inverse-gamma shapes must exceed 1")
        object.__setattr__(self, "V_theta_diag", v)
        object.__setattr__(self, "theta0", np.asarray(self.theta0, dtype=np.float64))

    @property
    def k(self) -> int:
        return self.V_theta_diag.shape[0]


def default_grid(kappa1: Sequence[float] = DEFAULT_KAPPA1,
                 kappa2: Sequence[float] = DEFAULT_KAPPA2) -> list[MinnesotaHyper]:
    return [MinnesotaHyper(a, b) for a, b in itertools.product(kappa1, kappa2)]


def ar4_residual_variances(data: Dataset, lags: int = 4) -> np.ndarray:
    """Residual variance of a per-variable AR(4) with intercept, fitted by least squares."""
    v = data.values
    T = v.shape[0]
    if T <= lags + 2:
        raise ValueError(f"need T > {lags + 2} observations, got {T}")
    out = np.empty(data.n)
    for r in range(data.n):
        y = v[:, r: r + 1]
        X = lagged_regressors(y, lags)
        target = y[lags:, 0]
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise SingularRegressionError(
                f"AR({lags}) regression for {data.variable_names[r]!r} is singular"
            )
        beta, *_ = np.linalg.lstsq(X, target, rcond=None)
        resid = target - X @ beta
        dof = target.shape[0] - X.shape[1]
        s2 = float(resid @ resid) / dof
        if s2 <= 1e-20 * max(float(np.var(target)), 1e-300):
            warnings.warn(
                f"{data.variable_names[r]!r} is fitted exactly by an AR({lags})",
                DegenerateSeriesWarning,
                stacklevel=2,
            )
            s2 = 0.0
        out[r] = s2
    return out


def build_prior(i: int, hyper: MinnesotaHyper, s2: np.ndarray, p: int,
                level_data: bool = False, V_h0: float = 10.0, nu: float = 5.0,
                S: float | None = None, nu_y: float = 3.0) -> PriorSpec:
    """Prior for equation ``i`` (1-based), ordered like the regressors of that equation.

    Contemporaneous ``j``: ``s_i^2/s_j^2``; intercept: ``100 s_i^2``;
    own lag ``l``: ``kappa1/l^2``; lag ``l`` of ``j != i``: ``kappa2 s_i^2/(l^2 s_j^2)``.
    """
    s2 = np.asarray(s2, dtype=np.float64)
    n = s2.shape[0]
    if not 1 <= i <= n:
        raise IndexError(f"equation index {i} outside 1..{n}")
    if np.any(s2 <= 0):
        raise ValueError("AR residual variances must be positive")
    r = i - 1
    si = s2[r]
    V = [si / s2[j] for j in range(r)]
    V.append(100.0 * si)
    theta0 = np.zeros(r + 1 + n * p)
    for lag in range(1, p + 1):
        for j in range(n):
            if j == r:
                V.append(hyper.kappa1 / lag**2)
            else:
                V.append(hyper.kappa2 * si / (lag**2 * s2[j]))
    if level_data and p >= 1:
        theta0[r + 1 + r] = 1.0
    if S is None:
        S = 0.04 * (nu - 1.0)
    return PriorSpec(theta0, np.array(V), V_h0=V_h0, nu=nu, S=S, nu_y=nu_y,
                     S_y=(nu_y - 1.0) * si)


def grid_search(data: Dataset, grid: Sequence[MinnesotaHyper], p: int, options=None,
                jobs: int = 1, **fit_kwargs):
    """Fit the VAR at every grid point and return the ELBO maximizer.

    Returns ``(best, table)`` where ``table`` is a list of
    ``(kappa1, kappa2, total_elbo)`` in grid order. Ties go to the smaller
    ``(kappa1, kappa2)`` pair.
    """
    from vbsv.vb import fit_var

    if not grid:
        raise ValueError("empty hyperparameter grid")

    def run(h: MinnesotaHyper) -> float:
        try:
            return fit_var(data, h, p, options, **fit_kwargs).total_elbo
        except Exception as exc:
            raise FitError(f"fit failed at grid point {h}: {exc}",
                           {"kappa1": h.kappa1, "kappa2": h.kappa2}) from exc

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as ex:
            elbos = list(ex.map(run, grid))
    else:
        elbos = [run(h) for h in grid]
    table = [(h.kappa1, h.kappa2, e) for h, e in zip(grid, elbos)]
    best_h, best_e = None, -np.inf
    for h, e in sorted(zip(grid, elbos), key=lambda he: (he[0].kappa1, he[0].kappa2)):
        if e > best_e:
            best_h, best_e = h, e
    logger.info("grid search picked %s (elbo %.4f)", best_h, best_e)
    return best_h, table
