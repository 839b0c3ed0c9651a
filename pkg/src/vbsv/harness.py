"""Monte Carlo accuracy study for the volatility approximations, and timing runs."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from vbsv.errors import VBSVError
from vbsv.mcmc import MCMCConfig, posterior_means, sample_sv_univariate, univariate_prior
from vbsv.model import EquationData, StructuralVAR, format_float, simulate_univariate_sv, simulate_var_sv
from vbsv.prior import MinnesotaHyper, PriorSpec
from vbsv.svapprox import SVTarget, approx_global, find_mode, kl_objective
from vbsv.vb import FitOptions, compute_shat2, fit_equation, fit_var

logger = logging.getLogger(__name__)

VB_METHODS = ("global", "taylor", "logchi2")


def mse(estimate, reference) -> float:
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


@dataclass(frozen=True)
class MCConfig:
    T: int = 300
    R: int = 50
    sigma_h2_true: float = 0.1
    h0_true: float = 0.0
    methods: tuple[str, ...] = VB_METHODS
    mcmc: MCMCConfig = field(default_factory=lambda: MCMCConfig(n_draws=5000, n_burn=500))
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 100
    intercept: bool = False  # add a constant regressor to the one-equation fit
    jobs: int = 1

    def __post_init__(self):
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.T < 10:
            raise ValueError("T must be >= 10")
        bad = set(self.methods) - set(VB_METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")


@dataclass
class MSEReport:
    methods: tuple[str, ...]
    mse: dict[str, list[float]]          # against the MCMC posterior mean
    mse_truth: dict[str, list[float]]    # against the simulated path; includes "mcmc"
    replications: list[int]
    skipped: list[tuple[int, str]]
    extras: dict[str, list[float]] = field(default_factory=dict)

    def summary(self) -> dict[str, tuple[float, ...]]:
        """``(min, 25%, median, 75%, max)`` of the MSE against MCMC per method."""
        return {m: tuple(float(x) for x in np.quantile(v, [0, 0.25, 0.5, 0.75, 1.0]))
                for m, v in self.mse.items()}

    def median(self, method: str) -> float:
        return float(np.median(self.mse[method]))

    def write_boxplot_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replication", "method", "mse"])
            for k, r in enumerate(self.replications):
                for m in self.methods:
                    w.writerow([r, m, format_float(self.mse[m][k])])

    def write_truth_csv(self, path) -> None:
        cols = ["mcmc", *self.methods]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replication", *cols])
            for k, r in enumerate(self.replications):
                w.writerow([r, *(format_float(self.mse_truth[m][k]) for m in cols)])


def _replication(args):
    """One simulated dataset: fit every method, run the reference chain."""
    index, seq, cfg = args
    data_seed, chain_seed = seq.spawn(2)
    z, h_true = simulate_univariate_sv(cfg.sigma_h2_true, cfg.h0_true, cfg.T, data_seed)
    prior = univariate_prior()
    X = np.ones((cfg.T, 1)) if cfg.intercept else np.zeros((cfg.T, 0))
    if cfg.intercept:
        prior = PriorSpec(np.zeros(1), np.array([10.0]), prior.V_h0, prior.nu, prior.S)
    eq = EquationData(1, z, X)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fits = {m: fit_equation(eq, prior, FitOptions(cfg.tol, cfg.max_iter, m)) for m in cfg.methods}
        draws = sample_sv_univariate(z, univariate_prior(), replace_seed(cfg.mcmc, chain_seed))
    h_bar = posterior_means(draws)
    means = {m: f.state.h_approx.mean for m, f in fits.items()}
    out = {
        "mse": {m: mse(v, h_bar) for m, v in means.items()},
        "truth": {"mcmc": mse(h_bar, h_true), **{m: mse(v, h_true) for m, v in means.items()}},
        "acceptance": draws.acceptance_rate,
        "iterations": {m: f.iterations for m, f in fits.items()},
    }
    if "global" in fits:
        out["kl_gap"] = kl_dominance_gap(eq, fits["global"].state)
    return index, out


def kl_dominance_gap(eq: EquationData, state) -> float:
    """``KL(global mean) - KL(mode)`` on the target defined by a fitted state.

    Both means share the precision at the mode, so the gap is never positive
    when the mean optimizer has converged.
    """
    t = SVTarget(compute_shat2(eq, state.theta_hat, state.theta), state.e_inv_sigma2, state.h0_hat)
    g = approx_global(t, state.h_approx.mean)
    mode = find_mode(t, state.h_approx.mean).mode
    return kl_objective(t, g, g.mean) - kl_objective(t, g, mode)


def replace_seed(cfg: MCMCConfig, seed) -> MCMCConfig:
    return replace(cfg, seed=seed)


def run_monte_carlo(cfg: MCConfig) -> MSEReport:
    """Simulate ``R`` datasets and score each approximation against the MCMC posterior mean.

    Replication ``r`` always uses the ``r``-th child of ``SeedSequence(seed)``,
    so results do not depend on ``jobs``.
    """
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.R)
    tasks = [(r, seqs[r], cfg) for r in range(cfg.R)]
    results: dict[int, dict] = {}
    skipped: list[tuple[int, str]] = []

    def collect(r, res):
        if isinstance(res, BaseException):
            logger.warning("replication %d skipped: %s", r, res)
            skipped.append((r, str(res)))
        else:
            results[r] = res

    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            futs = [ex.submit(_replication, t) for t in tasks]
            for r, fut in enumerate(futs):
                try:
                    collect(r, fut.result()[1])
                except (VBSVError, ArithmeticError, ValueError) as exc:
                    collect(r, exc)
    else:
        for t in tasks:
            try:
                collect(t[0], _replication(t)[1])
            except (VBSVError, ArithmeticError, ValueError) as exc:
                collect(t[0], exc)

    reps = sorted(results)
    methods = tuple(cfg.methods)
    report = MSEReport(
        methods,
        {m: [results[r]["mse"][m] for r in reps] for m in methods},
        {m: [results[r]["truth"][m] for r in reps] for m in ("mcmc", *methods)},
        reps,
        skipped,
    )
    report.extras["acceptance"] = [results[r]["acceptance"] for r in reps]
    for m in methods:
        report.extras[f"iterations_{m}"] = [results[r]["iterations"][m] for r in reps]
    if all("kl_gap" in results[r] for r in reps):
        report.extras["kl_gap"] = [results[r]["kl_gap"] for r in reps]
    return report


# ---------------------------------------------------------------- timing

def synthetic_var(n: int, T: int, p: int, seed) -> "tuple":
    """A stable VAR-SV with modest cross-dependence, for timing and model comparison."""
    rng = np.random.default_rng(seed)
    B0 = np.eye(n)
    B0[np.tril_indices(n, -1)] = rng.normal(0.0, 0.2, n * (n - 1) // 2)
    B = np.zeros((p, n, n))
    B[0] = np.diag(rng.uniform(0.2, 0.5, n)) + rng.normal(0.0, 0.02, (n, n)) * (1 - np.eye(n))
    m = StructuralVAR(B0, rng.normal(0.0, 0.1, n), B, rng.normal(0.0, 0.5, n), np.full(n, 0.05))
    return simulate_var_sv(m, T, rng)


def run_timing(sizes, methods=("global", "taylor", "logchi2", "homoscedastic"), p: int = 4,
               seed: int = 0, include_mcmc: bool = True,
               mcmc: MCMCConfig | None = None) -> list[tuple[int, int, str, float]]:
    """Wall-clock seconds per ``(n, T, method)``.

    For ``n == 1`` the reference chain is timed too (method ``mcmc``).
    """
    rows = []
    hyper = MinnesotaHyper(0.04, 0.001)
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    for (n, T), seq in zip(sizes, seqs):
        data, _ = synthetic_var(n, T, p, seq)
        for m in methods:
            t0 = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fit_var(data, hyper, p, FitOptions(sv_method=m))
            rows.append((n, T, m, time.perf_counter() - t0))
        if n == 1 and include_mcmc:
            t0 = time.perf_counter()
            sample_sv_univariate(data.values[p:, 0], univariate_prior(), mcmc or MCMCConfig(seed=seq))
            rows.append((n, T, "mcmc", time.perf_counter() - t0))
    return rows


def write_timing_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "T", "method", "seconds"])
        for n, T, m, s in rows:
            w.writerow([n, T, m, f"{s:.6f}"])
