"""Generalized-FEVD connectedness: pairwise, directional, system-wide, and grouped.

Values are shares in [0, 1] internally; the group tables and CSV writers
apply the conventional x100 percentage scaling.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from vbsv.errors import ConfigError, NotPositiveDefiniteError
from vbsv.model import Dataset, format_float

logger = logging.getLogger(__name__)

DEFAULT_HORIZON = 10


@dataclass(frozen=True)
class MATerms:
    """Moving-average matrices ``A_0 = I, A_1, ..., A_{H-1}`` stacked as ``(H, n, n)``."""

    A: np.ndarray

    @property
    def horizon(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]


def ma_coefficients(B_tilde, H: int) -> MATerms:
    """``A_h = sum_{j=1}^{min(h,p)} B_j A_{h-j}`` from reduced-form lag matrices ``(p, n, n)``."""
    B = np.asarray(B_tilde, dtype=np.float64)
    if B.ndim == 2:
        B = B[None]
    if H < 1:
        raise ValueError("horizon must be >= 1")
    p, n = B.shape[0], B.shape[1]
    A = np.zeros((H, n, n))
    A[0] = np.eye(n)
    for h in range(1, H):
        for j in range(1, min(h, p) + 1):
            A[h] += B[j - 1] @ A[h - j]
    return MATerms(A)


def gfevd(ma: MATerms, sigma, H: int | None = None, classical_denominator: bool = False) -> np.ndarray:
    """Generalized forecast-error variance shares ``theta[i, j]``.

    The default denominator is ``sum_h (e_i' A_h S A_h' e_i)^2``. With
    ``classical_denominator=True`` the summands are not squared, which gives
    the usual generalized FEVD. Both versions normalize to the same ``C``.
    """
    S = np.asarray(sigma, dtype=np.float64)
    n = S.shape[0]
    if S.shape != (n, n) or ma.n != n:
        raise ValueError("sigma and MA terms disagree in dimension")
    if not np.allclose(S, S.T, rtol=1e-12, atol=1e-14 * float(np.max(np.abs(S)))):
        raise ValueError("sigma must be symmetric")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(-1, "sigma is not positive definite") from exc
    H = ma.horizon if H is None else H
    if not 1 <= H <= ma.horizon:
        raise ValueError(f"H must be in 1..{ma.horizon}")
    A = ma.A[:H]
    AS = A @ S  # (H, n, n)
    num = np.sum(AS * AS, axis=0) / np.diag(S)[None, :]
    var = np.einsum("hij,hij->hi", AS, A)  # e_i' A_h S A_h' e_i
    den = np.sum(var if classical_denominator else var * var, axis=0)
    return num / den[:, None]


def normalize(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    rows = theta.sum(axis=1)
    if np.any(rows <= 0):
        raise ValueError("every row of theta must have a positive sum")
    return theta / rows[:, None]


@dataclass(frozen=True)
class ConnectednessTable:
    C: np.ndarray
    from_others: np.ndarray
    to_others: np.ndarray
    net: np.ndarray
    system_wide: float
    time_label: object = None

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def from_sums(self) -> np.ndarray:
        """Unscaled off-diagonal row sums (``n * from_others``)."""
        return self.n * self.from_others

    @property
    def to_sums(self) -> np.ndarray:
        return self.n * self.to_others


def _offdiag(C: np.ndarray) -> np.ndarray:
    off = np.array(C, dtype=np.float64, copy=True)
    np.fill_diagonal(off, 0.0)
    return off


def directional(C, time_label=None) -> ConnectednessTable:
    """From, to, net and system-wide connectedness of a normalized table.

    ``from_i = (1/n) sum_{j != i} C[i, j]``, ``to_j = (1/n) sum_{i != j} C[i, j]``
    and ``system_wide = (1/n) sum_{i != j} C[i, j]``.
    """
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    off = _offdiag(C)
    frm = off.sum(axis=1) / n
    to = off.sum(axis=0) / n
    return ConnectednessTable(C, frm, to, to - frm, float(off.sum() / n), time_label)


def connectedness_table(B_tilde, sigma, H: int = DEFAULT_HORIZON, time_label=None,
                        classical_denominator: bool = False) -> ConnectednessTable:
    ma = ma_coefficients(B_tilde, H)
    return directional(normalize(gfevd(ma, sigma, H, classical_denominator)), time_label)


# ---------------------------------------------------------------- groups

@dataclass(frozen=True)
class GroupMap:
    """Country and region of every variable."""

    country: Mapping[str, str]
    region: Mapping[str, str]

    @classmethod
    def from_csv(cls, path) -> "GroupMap":
        """Columns ``variable,country,region`` (region optional, defaults to country)."""
        country, region = {}, {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                v = row["variable"].strip()
                country[v] = row["country"].strip()
                region[v] = (row.get("region") or row["country"]).strip()
        return cls(country, region)

    def labels(self, names: Sequence[str], level: str = "region") -> list[str]:
        m = self.region if level == "region" else self.country
        missing = [v for v in names if v not in m]
        if missing:
            raise ConfigError(f"variables missing from the group map: {missing}")
        return [m[v] for v in names]


@dataclass(frozen=True)
class GroupTable:
    """Group-to-group spillovers in percent.

    ``matrix[g, h]`` sums ``C[i, j]`` over ``i`` in ``g`` and ``j`` in ``h``
    (``i != j``) with the diagonal blanked. ``from_others`` and ``to_others``
    count every ``i != j`` pair, including pairs inside the same group, so their
    totals both equal ``100 * n * system_wide``.
    """

    groups: list[str]
    matrix: np.ndarray
    from_others: np.ndarray
    to_others: np.ndarray

    @property
    def net(self) -> np.ndarray:
        return self.to_others - self.from_others


def aggregate_groups(C, labels: Sequence[str]) -> GroupTable:
    C = np.asarray(C, dtype=np.float64)
    if len(labels) != C.shape[0]:
        raise ValueError("one group label per variable is required")
    groups = list(dict.fromkeys(labels))
    idx = np.array([groups.index(g) for g in labels])
    G = np.zeros((len(groups), C.shape[0]))
    G[idx, np.arange(C.shape[0])] = 1.0
    off = _offdiag(C) * 100.0
    full = G @ off @ G.T
    matrix = full.copy()
    np.fill_diagonal(matrix, 0.0)
    return GroupTable(groups, matrix, full.sum(axis=1), full.sum(axis=0))


def decompose_cross_within(C, countries: Sequence[str]) -> tuple[float, float]:
    """Split system-wide connectedness into cross-country and within-country parts."""
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    if len(countries) != n:
        raise ValueError("one country per variable is required")
    c = np.asarray(countries, dtype=object)
    same = c[:, None] == c[None, :]
    off = _offdiag(C)
    within = float(off[same].sum() / n)
    cross = float(off[~same].sum() / n)
    return cross, within


# ---------------------------------------------------------------- from fits

def reduced_form_connectedness(rf, labels: Sequence, H: int = DEFAULT_HORIZON,
                               classical_denominator: bool = False,
                               times: Sequence[int] | None = None) -> list[ConnectednessTable]:
    """One table per date from reduced-form coefficients and log-volatility paths."""
    ma = ma_coefficients(rf.B_tilde, H)
    sig = rf.sigma_tilde_all()
    times = range(sig.shape[0]) if times is None else times
    return [directional(normalize(gfevd(ma, sig[t], H, classical_denominator)), labels[t])
            for t in times]


def dynamic_connectedness(fit, H: int = DEFAULT_HORIZON, classical_denominator: bool = False,
                          times: Sequence[int] | None = None) -> list[ConnectednessTable]:
    """Time-varying tables with ``B`` at its posterior mean and ``Sigma_t`` from ``exp(h_t)``."""
    return reduced_form_connectedness(fit.reduced_form(), fit.time_index, H,
                                      classical_denominator, times)


def sample_connectedness(fit, H: int = DEFAULT_HORIZON, n_draws: int = 1000, seed=0,
                         times: Sequence[int] | None = None,
                         classical_denominator: bool = False) -> np.ndarray:
    """System-wide connectedness under draws from the variational factors.

    Returns ``(n_draws, len(times))``; summarize with ``np.quantile``.
    """
    from scipy.linalg import solve_triangular

    from vbsv.model import StructuralVAR, to_reduced_form
    from vbsv.vb import HomoscedasticState

    rng = np.random.default_rng(seed)
    T = fit.data.T - fit.p
    times = list(range(T)) if times is None else list(times)
    out = np.empty((n_draws, len(times)))
    for d in range(n_draws):
        thetas, logv = [], np.empty((T, fit.n))
        for r, res in enumerate(fit.results):
            st = res.state
            th = st.theta
            eps = rng.standard_normal(th.k)
            thetas.append(th.mean + (solve_triangular(th.chol.T, eps, lower=False) if th.k else eps))
            if isinstance(st, HomoscedasticState):
                logv[:, r] = math.log(st.S_hat / rng.gamma(st.nu_hat))
            else:
                logv[:, r] = st.h_approx.sample(rng)
        rf = to_reduced_form(StructuralVAR.from_thetas(thetas, fit.p, h_paths=logv))
        ma = ma_coefficients(rf.B_tilde, H)
        for k, t in enumerate(times):
            C = normalize(gfevd(ma, rf.sigma_tilde(t), H, classical_denominator))
            out[d, k] = directional(C).system_wide
    return out


def rolling_windows(T: int, window: int, stride: int = 1) -> list[tuple[int, int]]:
    if window > T:
        raise ValueError(f"window {window} exceeds sample length {T}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return [(s, s + window) for s in range(0, T - window + 1, stride)]


def rolling_fit_connectedness(data: Dataset, window: int, hyper, p: int, H: int = DEFAULT_HORIZON,
                              options=None, stride: int = 1, jobs: int = 1,
                              classical_denominator: bool = False, **fit_kwargs) -> list[ConnectednessTable]:
    """Refit on each window and evaluate connectedness at the window's last date."""
    from vbsv.vb import fit_var

    if window - p < 8:
        raise ValueError(f"window {window} leaves too few observations for {p} lags")
    spans = rolling_windows(data.T, window, stride)

    def run(span):
        sub = data.window(*span)
        fit = fit_var(sub, hyper, p, options, **fit_kwargs)
        last = sub.T - p - 1
        return dynamic_connectedness(fit, H, classical_denominator, times=[last])[0]

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(run, spans))
    return [run(s) for s in spans]


# ---------------------------------------------------------------- CSV

def write_pairwise_csv(tables: Sequence[ConnectednessTable], names: Sequence[str], path) -> None:
    """Long format ``time,i,j,C`` in percent."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "i", "j", "C"])
        for tab in tables:
            for a, ni in enumerate(names):
                for b, nj in enumerate(names):
                    w.writerow([tab.time_label, ni, nj, format_float(100.0 * tab.C[a, b])])


def series_rows(tab: ConnectednessTable, names: Sequence[str], countries: Sequence[str] | None = None):
    yield "system_wide", 100.0 * tab.system_wide
    if countries is not None:
        cross, within = decompose_cross_within(tab.C, countries)
        yield "cross_country", 100.0 * cross
        yield "within_country", 100.0 * within
    for k, v in enumerate(names):
        yield f"from_others:{v}", 100.0 * tab.from_others[k]
        yield f"to_others:{v}", 100.0 * tab.to_others[k]
        yield f"net:{v}", 100.0 * tab.net[k]


def write_series_csv(tables: Sequence[ConnectednessTable], names: Sequence[str], path,
                     countries: Sequence[str] | None = None) -> None:
    """Long format ``time,measure,value`` in percent."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "measure", "value"])
        for tab in tables:
            for name, value in series_rows(tab, names, countries):
                w.writerow([tab.time_label, name, format_float(value)])


def read_long_csv(path) -> list[tuple[str, ...]]:
    """Rows of a long-format CSV as string tuples, with the value column parsed as float."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [tuple(row[:-1]) + (float(row[-1]),) for row in r]
