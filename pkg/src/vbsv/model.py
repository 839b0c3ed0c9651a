"""VAR-SV model representation, data ingestion and simulation.

The structural model is

    B0 y_t = b + B_1 y_{t-1} + ... + B_p y_{t-p} + e_t,  e_t ~ N(0, diag(exp(h_t)))

with ``B0`` unit lower triangular and each ``h_{i,t}`` a Gaussian random walk
started at ``h_{i,0}``. Equation ``i`` (1-based throughout this package) is the
univariate regression ``y_{i,t} = x_{i,t} theta_i + e_{i,t}`` with

    x_{i,t} = (-y_{1,t}, ..., -y_{i-1,t}, 1, y_{t-1}', ..., y_{t-p}')

so that ``theta_i = (alpha_i, b_i, B_1[i, :], ..., B_p[i, :])`` has
``k_i = n p + i`` entries and ``B0[i, j] = alpha_i[j]``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vbsv.errors import DimensionError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Dataset:
    """``T x n`` block of observations with labels."""

    values: np.ndarray
    variable_names: tuple[str, ...]
    time_index: tuple
    metadata: dict | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise DimensionError("values must be a T x n matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("dataset contains missing or non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        names = tuple(str(s) for s in self.variable_names)
        if len(names) != v.shape[1]:
            raise DimensionError(f"{len(names)} names for {v.shape[1]} variables")
        object.__setattr__(self, "variable_names", names)
        idx = tuple(self.time_index)
        if len(idx) != v.shape[0]:
            raise DimensionError(f"{len(idx)} time labels for {v.shape[0]} rows")
        object.__setattr__(self, "time_index", idx)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_array(cls, values, names: Sequence[str] | None = None) -> "Dataset":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        names = names or [f"y{j + 1}" for j in range(v.shape[1])]
        return cls(v, tuple(names), tuple(range(1, v.shape[0] + 1)))

    def window(self, start: int, stop: int) -> "Dataset":
        return Dataset(
            self.values[start:stop], self.variable_names, self.time_index[start:stop], self.metadata
        )

    def scaled(self, c: float) -> "Dataset":
        return Dataset(self.values * c, self.variable_names, self.time_index, self.metadata)


@dataclass(frozen=True)
class StructuralVAR:
    B0: np.ndarray
    b: np.ndarray
    B: np.ndarray  # (p, n, n)
    h0: np.ndarray
    sigma_h2: np.ndarray
    h_paths: np.ndarray | None = None  # (T, n)

    def __post_init__(self):
        B0 = np.asarray(self.B0, dtype=np.float64)
        n = B0.shape[0]
        if not np.allclose(np.triu(B0, 1), 0.0) or not np.all(np.diag(B0) == 1.0):
            raise ValueError("B0 must be unit lower triangular")
        B = np.asarray(self.B, dtype=np.float64).reshape(-1, n, n)
        s2 = np.asarray(self.sigma_h2, dtype=np.float64).reshape(n)
        if np.any(s2 < 0):
            raise ValueError("sigma_h2 must be non-negative")
        object.__setattr__(self, "B0", B0)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(n))
        object.__setattr__(self, "h0", np.asarray(self.h0, dtype=np.float64).reshape(n))
        object.__setattr__(self, "sigma_h2", s2)

    @property
    def n(self) -> int:
        return self.B0.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[0]

    def theta(self, i: int) -> np.ndarray:
        """Stacked coefficient vector of equation ``i`` (1-based)."""
        r = i - 1
        return np.concatenate([self.B0[r, :r], [self.b[r]], self.B[:, r, :].reshape(-1)])

    @classmethod
    def from_thetas(cls, thetas: Sequence[np.ndarray], p: int, h0=None, sigma_h2=None,
                    h_paths=None) -> "StructuralVAR":
        n = len(thetas)
        B0 = np.eye(n)
        b = np.zeros(n)
        B = np.zeros((p, n, n))
        for r, th in enumerate(thetas):
            th = np.asarray(th, dtype=np.float64)
            if th.shape[0] != n * p + r + 1:
                raise DimensionError(f"theta for equation {r + 1} has length {th.shape[0]}")
            B0[r, :r] = th[:r]
            b[r] = th[r]
            B[:, r, :] = th[r + 1:].reshape(p, n)
        return cls(
            B0, b, B,
            np.zeros(n) if h0 is None else h0,
            np.zeros(n) if sigma_h2 is None else sigma_h2,
            h_paths,
        )


@dataclass(frozen=True)
class ReducedFormVAR:
    b_tilde: np.ndarray
    B_tilde: np.ndarray  # (p, n, n)
    B0_inv: np.ndarray
    log_vol: np.ndarray  # (T, n) structural log-variances

    def sigma_tilde(self, t: int) -> np.ndarray:
        return self.B0_inv @ (np.exp(self.log_vol[t])[:, None] * self.B0_inv.T)

    def sigma_tilde_all(self) -> np.ndarray:
        d = np.exp(self.log_vol)
        return np.einsum("ij,tj,kj->tik", self.B0_inv, d, self.B0_inv)


def to_reduced_form(m: StructuralVAR) -> ReducedFormVAR:
    n = m.n
    B0_inv = _unit_lower_inverse(m.B0)
    log_vol = m.h_paths if m.h_paths is not None else m.h0[None, :]
    return ReducedFormVAR(
        b_tilde=B0_inv @ m.b,
        B_tilde=np.einsum("ij,ljk->lik", B0_inv, m.B),
        B0_inv=B0_inv,
        log_vol=np.asarray(log_vol, dtype=np.float64).reshape(-1, n),
    )


def _unit_lower_inverse(B0: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular

    return solve_triangular(B0, np.eye(B0.shape[0]), lower=True, unit_diagonal=True)


@dataclass(frozen=True)
class EquationData:
    """Response and regressors for one equation of the recursive system."""

    i: int
    y: np.ndarray
    X: np.ndarray

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]


def lagged_regressors(values: np.ndarray, p: int) -> np.ndarray:
    """Rows ``(1, y_{t-1}', ..., y_{t-p}')`` for ``t = p..T-1``."""
    T, n = values.shape
    cols = [np.ones((T - p, 1))]
    for lag in range(1, p + 1):
        cols.append(values[p - lag: T - lag])
    return np.hstack(cols)


def build_equation_data(data: Dataset, i: int, p: int) -> EquationData:
    """Regression data for equation ``i`` (1-based); the first ``p`` rows are lost to lags."""
    n, T = data.n, data.T
    if not 1 <= i <= n:
        raise IndexError(f"equation index {i} outside 1..{n}")
    if p < 0:
        raise ValueError("lag order must be non-negative")
    if T <= p:
        raise DimensionError(f"T={T} too short for p={p} lags")
    v = data.values
    X = np.hstack([-v[p:, : i - 1], lagged_regressors(v, p)])
    return EquationData(i=i, y=v[p:, i - 1].copy(), X=X)


def equation_loglik(eq: EquationData, theta: np.ndarray, h: np.ndarray) -> float:
    r = eq.y - eq.X @ theta
    return float(-0.5 * eq.T * LOG_2PI - 0.5 * np.sum(h) - 0.5 * np.sum(np.exp(-h) * r * r))


def joint_loglik(data: Dataset, m: StructuralVAR) -> float:
    """Reduced-form Gaussian log-likelihood of ``data[p:]`` given presample lags."""
    rf = to_reduced_form(m)
    p, T = m.p, data.T
    v = data.values
    total = 0.0
    for t in range(p, T):
        mu = rf.b_tilde.copy()
        for lag in range(1, p + 1):
            mu += rf.B_tilde[lag - 1] @ v[t - lag]
        h_t = m.h_paths[t - p] if m.h_paths is not None else m.h0
        S = rf.B0_inv @ (np.exp(h_t)[:, None] * rf.B0_inv.T)
        r = v[t] - mu
        sign, logdet = np.linalg.slogdet(S)
        total += -0.5 * (m.n * LOG_2PI + logdet + r @ np.linalg.solve(S, r))
    return total


def garman_klass(open_, high, low, close, floor: bool = True,
                 annualize: float | None = None) -> np.ndarray:
    """Range-based daily variance ``0.5 ln(H/L)^2 - (2 ln 2 - 1) ln(C/O)^2``.

    Negative estimates are floored at zero unless ``floor=False``;
    ``annualize`` multiplies the result (e.g. 252).
    """
    o, h, lo, c = (np.asarray(x, dtype=np.float64) for x in (open_, high, low, close))
    if np.any(o <= 0) or np.any(h <= 0) or np.any(lo <= 0) or np.any(c <= 0):
        raise ValueError("prices must be strictly positive")
    if np.any(h < lo):
        raise ValueError("high below low")
    v = 0.5 * np.log(h / lo) ** 2 - (2.0 * math.log(2.0) - 1.0) * np.log(c / o) ** 2
    if floor:
        v = np.maximum(v, 0.0)
    if annualize is not None:
        v = v * annualize
    return v


def simulate_univariate_sv(sigma_h2: float, h0: float, T: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(z, h)`` with ``h`` a random walk from ``h0`` and ``z_t = exp(h_t/2) u_t``."""
    if sigma_h2 < 0:
        raise ValueError("sigma_h2 must be non-negative")
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(T) * math.sqrt(sigma_h2)
    h = h0 + np.cumsum(v)
    u = rng.standard_normal(T)
    return np.exp(0.5 * h) * u, h


def simulate_var_sv(m: StructuralVAR, T: int, seed, burn: int = 100,
                    names: Sequence[str] | None = None) -> tuple[Dataset, np.ndarray]:
    """Simulate ``T`` observations (plus ``p`` presample rows) from the VAR-SV.

    The log-volatility innovations and the shocks for the retained sample are
    drawn first, so with zero coefficients and ``n = 1`` the output equals
    :func:`simulate_univariate_sv` under the same seed. Burn-in rows use
    constant volatility ``exp(h0)``. Returns the dataset (``T + p`` rows) and
    the ``(T, n)`` true log-volatility paths aligned with rows ``p..``.
    """
    n, p = m.n, m.p
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((T, n)) * np.sqrt(m.sigma_h2)
    h = m.h0 + np.cumsum(v, axis=0)
    u = rng.standard_normal((T, n))
    pre = burn + p
    u_pre = rng.standard_normal((pre, n))
    eps = np.vstack([np.exp(0.5 * m.h0) * u_pre, np.exp(0.5 * h) * u])
    B0_inv = _unit_lower_inverse(m.B0)
    y = np.zeros((pre + T + p, n))
    for t in range(p, pre + T + p):
        rhs = m.b + eps[t - p]
        for lag in range(1, p + 1):
            rhs = rhs + m.B[lag - 1] @ y[t - lag]
        y[t] = B0_inv @ rhs
    y = y[pre:]
    names = names or [f"y{j + 1}" for j in range(n)]
    return Dataset(y, tuple(names), tuple(range(1, y.shape[0] + 1))), h


# ---------------------------------------------------------------- CSV I/O

def format_float(x: float) -> str:
    return repr(float(x))


def read_csv(path) -> Dataset:
    """Wide CSV: header row, first column time label, remaining columns numeric.

    Rows with any missing or unparsable value are dropped; the count is logged
    and stored in ``Dataset.dropped_rows``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2:
            raise ValueError(f"{path}: need a time column and at least one variable")
        labels, rows, dropped = [], [], 0
        for rec in reader:
            if not rec:
                continue
            try:
                vals = [float(x) for x in rec[1:]]
            except ValueError:
                dropped += 1
                continue
            if len(vals) != len(header) - 1 or not all(math.isfinite(x) for x in vals):
                dropped += 1
                continue
            labels.append(_parse_label(rec[0]))
            rows.append(vals)
    if dropped:
        logger.warning("%s: dropped %d rows with missing values", path, dropped)
    if not rows:
        raise ValueError(f"{path}: no complete rows")
    return Dataset(np.array(rows), tuple(header[1:]), tuple(labels), dropped_rows=dropped)


def _parse_label(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def write_csv(data: Dataset, path, time_header: str = "time") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([time_header, *data.variable_names])
        for lab, row in zip(data.time_index, data.values):
            w.writerow([lab, *(format_float(x) for x in row)])


def read_ohlc(path, log_transform: bool = False, annualize: float | None = None) -> Dataset:
    """Long-format OHLC (date, ticker, open, high, low, close) to a wide GK-volatility dataset.

    Dates missing any ticker are dropped.
    """
    by_date: dict = {}
    tickers: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            t = rec["ticker"]
            if t not in tickers:
                tickers.append(t)
            try:
                px = [float(rec[k]) for k in ("open", "high", "low", "close")]
            except (TypeError, ValueError):
                continue
            by_date.setdefault(_parse_label(rec["date"]), {})[t] = px
    dates = sorted(by_date)
    keep = [d for d in dates if len(by_date[d]) == len(tickers)]
    dropped = len(dates) - len(keep)
    if dropped:
        logger.warning("%s: dropped %d dates with missing tickers", path, dropped)
    if not keep:
        raise ValueError(f"{path}: no complete dates")
    px = np.array([[by_date[d][t] for t in tickers] for d in keep])  # (T, n, 4)
    vol = garman_klass(px[..., 0], px[..., 1], px[..., 2], px[..., 3], annualize=annualize)
    if log_transform:
        vol = np.log(np.maximum(vol, 1e-12))
    return Dataset(vol, tuple(tickers), tuple(keep), dropped_rows=dropped)
