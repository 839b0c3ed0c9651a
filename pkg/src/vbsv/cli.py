"""Command-line entry point: ``vbsv <command> [options]``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 input/output, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from vbsv.errors import ConfigError, VBSVError
from vbsv.model import Dataset, StructuralVAR, format_float, read_csv, to_reduced_form, write_csv

logger = logging.getLogger("vbsv")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5

# option name -> (type, default); shared by flags and config files
OPTIONS = {
    "seed": (int, 0),
    "method": (str, "global"),
    "lags": (int, 4),
    "horizon": (int, 10),
    "window": (int, None),
    "stride": (int, 1),
    "jobs": (int, 1),
    "kappa1": (float, 0.04),
    "kappa2": (float, 0.001),
    "kappa1_grid": (str, "0.01,0.04,0.16,0.64"),
    "kappa2_grid": (str, "0.0001,0.001,0.01,0.1"),
    "tol": (float, 1e-6),
    "max_iter": (int, 100),
    "data": (str, None),
    "fit": (str, None),
    "groups": (str, None),
    "level_data": (bool, False),
    "n": (int, 3),
    "T": (int, 300),
    "R": (int, 50),
    "n_draws": (int, 5000),
    "n_burn": (int, 500),
    "sizes": (str, "1x300,5x300,25x300"),
    "classical_denominator": (bool, False),
}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        typ = OPTIONS[key][0]
        try:
            out[key] = _parse_bool(value) if typ is bool else typ(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags override it")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--data", help="wide CSV (default: bundled 3-variable toy data)")
    model.add_argument("--method", choices=("logchi2", "taylor", "global", "homoscedastic"))
    model.add_argument("--lags", type=int)
    model.add_argument("--kappa1", type=float)
    model.add_argument("--kappa2", type=float)
    model.add_argument("--tol", type=float)
    model.add_argument("--max-iter", dest="max_iter", type=int)
    model.add_argument("--level-data", dest="level_data", action="store_const", const=True)

    p = argparse.ArgumentParser(prog="vbsv", description="Variational Bayes for VARs with stochastic volatility.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic VAR-SV dataset")
    s.add_argument("--n", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--lags", type=int)

    sub.add_parser("fit", parents=[common, model], help="fit the VAR and write per-equation summaries")

    c = sub.add_parser("connect", parents=[common, model], help="connectedness tables and series")
    c.add_argument("--fit", help="fit_state.json written by 'fit' (skips refitting)")
    c.add_argument("--horizon", type=int)
    c.add_argument("--window", type=int, help="rolling-window length (refits per window)")
    c.add_argument("--stride", type=int)
    c.add_argument("--groups", help="CSV with columns variable,country,region")
    c.add_argument("--classical-denominator", dest="classical_denominator", action="store_const", const=True)

    m = sub.add_parser("mc", parents=[common], help="Monte Carlo accuracy study")
    m.add_argument("--T", type=int)
    m.add_argument("--R", type=int)
    m.add_argument("--n-draws", dest="n_draws", type=int)
    m.add_argument("--n-burn", dest="n_burn", type=int)

    g = sub.add_parser("grid", parents=[common, model], help="ELBO over the shrinkage grid")
    g.add_argument("--kappa1-grid", dest="kappa1_grid", help="comma-separated own-lag values")
    g.add_argument("--kappa2-grid", dest="kappa2_grid", help="comma-separated cross-lag values")

    t = sub.add_parser("timing", parents=[common], help="wall-clock fit times")
    t.add_argument("--sizes", help="comma-separated nxT list, e.g. 1x300,5x300")
    t.add_argument("--lags", type=int)
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = {k: d for k, (_, d) in OPTIONS.items()}
    if args.config:
        cfg.update(read_config(args.config))
    for k in OPTIONS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    cfg["out"] = Path(args.out)
    return cfg


def load_data(cfg) -> Dataset:
    if cfg["data"]:
        return read_csv(cfg["data"])
    with resources.as_file(resources.files("vbsv") / "data" / "toy3.csv") as path:
        return read_csv(path)


def _options(cfg):
    from vbsv.vb import FitOptions

    return FitOptions(tol=cfg["tol"], max_iter=cfg["max_iter"], sv_method=cfg["method"])


def _hyper(cfg):
    from vbsv.prior import MinnesotaHyper

    return MinnesotaHyper(cfg["kappa1"], cfg["kappa2"])


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg) -> None:
    from vbsv.harness import synthetic_var

    n, T, p = cfg["n"], cfg["T"], cfg["lags"]
    data, h = synthetic_var(n, T, p, np.random.SeedSequence(cfg["seed"]))
    write_csv(data, cfg["out"] / "data.csv")
    truth = Dataset(h, data.variable_names, data.time_index[p:])
    write_csv(truth, cfg["out"] / "true_logvol.csv")


def fit_summary_rows(eq, res):
    """Rows ``(kind, index, mean, sd)``: coefficients, then log-volatility, then ``E[1/sigma^2]``."""
    st = res.state
    th = st.theta
    for j, (m, v) in enumerate(zip(th.mean, th.cov_diag())):
        yield "theta", j + 1, m, float(np.sqrt(v))
    if hasattr(st, "h_approx"):
        for t, (m, v) in enumerate(zip(st.h_approx.mean, st.h_approx.inv_diag)):
            yield "h", t + 1, m, float(np.sqrt(v))
        yield "h0", 0, st.h0_hat, float(np.sqrt(1.0 / st.K_h0))
    yield "e_inv_sigma2", 0, st.e_inv_sigma2, float("nan")


def save_fit_state(fit, path) -> None:
    m = fit.structural()
    state = {
        "variables": list(fit.data.variable_names),
        "time": list(fit.time_index),
        "p": fit.p,
        "B0": m.B0.tolist(),
        "b": m.b.tolist(),
        "B": m.B.tolist(),
        "log_vol": fit.log_vol().tolist(),
        "elbo": [r.elbo for r in fit.results],
        "method": fit.options.sv_method,
    }
    Path(path).write_text(json.dumps(state, indent=1) + "\n", encoding="utf-8")


def load_fit_state(path):
    try:
        s = json.loads(Path(path).read_text(encoding="utf-8"))
        n = len(s["variables"])
        m = StructuralVAR(np.array(s["B0"]), np.array(s["b"]), np.array(s["B"]).reshape(-1, n, n),
                          np.zeros(n), np.zeros(n), np.array(s["log_vol"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: not a valid fit state ({exc})") from None
    return m, s["variables"], s["time"]


def _fit(cfg, data):
    from vbsv.vb import fit_var

    return fit_var(data, _hyper(cfg), cfg["lags"], _options(cfg), level_data=cfg["level_data"],
                   jobs=cfg["jobs"])


def cmd_fit(cfg) -> None:
    from vbsv.model import build_equation_data

    data = load_data(cfg)
    fit = _fit(cfg, data)
    for i, res in enumerate(fit.results, 1):
        eq = build_equation_data(data, i, fit.p)
        with open(cfg["out"] / f"fit_summary_eq{i}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "index", "mean", "sd"])
            for kind, j, m, sd in fit_summary_rows(eq, res):
                w.writerow([kind, j, format_float(m), format_float(sd)])
    with open(cfg["out"] / "fit_elbo.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["equation", "elbo", "iterations", "converged"])
        for i, r in enumerate(fit.results, 1):
            w.writerow([i, format_float(r.elbo), r.iterations, int(r.converged)])
    save_fit_state(fit, cfg["out"] / "fit_state.json")
    logger.info("total ELBO %.6f", fit.total_elbo)


def cmd_connect(cfg) -> None:
    from vbsv import connectedness as cn

    H = cfg["horizon"]
    if cfg["window"]:
        data = load_data(cfg)
        tables = cn.rolling_fit_connectedness(data, cfg["window"], _hyper(cfg), cfg["lags"], H, _options(cfg),
                                              stride=cfg["stride"], jobs=cfg["jobs"],
                                              classical_denominator=cfg["classical_denominator"],
                                              level_data=cfg["level_data"])
        names = list(data.variable_names)
    elif cfg["fit"]:
        m, names, labels = load_fit_state(cfg["fit"])
        tables = cn.reduced_form_connectedness(to_reduced_form(m), labels, H, cfg["classical_denominator"])
    else:
        data = load_data(cfg)
        fit = _fit(cfg, data)
        tables = cn.dynamic_connectedness(fit, H, cfg["classical_denominator"])
        names = list(data.variable_names)
    countries = None
    if cfg["groups"]:
        gm = cn.GroupMap.from_csv(cfg["groups"])
        countries = gm.labels(names, "country")
        regions = gm.labels(names, "region")
        with open(cfg["out"] / "connectedness_groups.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "to_group", "from_group", "value"])
            for tab in tables:
                g = cn.aggregate_groups(tab.C, regions)
                for a, ga in enumerate(g.groups):
                    for b, gb in enumerate(g.groups):
                        w.writerow([tab.time_label, ga, gb, format_float(g.matrix[a, b])])
                    w.writerow([tab.time_label, ga, "from_others", format_float(g.from_others[a])])
                    w.writerow([tab.time_label, "to_others", ga, format_float(g.to_others[a])])
    cn.write_pairwise_csv(tables, names, cfg["out"] / "connectedness_pairwise.csv")
    cn.write_series_csv(tables, names, cfg["out"] / "connectedness_series.csv", countries)


def cmd_mc(cfg) -> None:
    from vbsv.harness import MCConfig, run_monte_carlo
    from vbsv.mcmc import MCMCConfig

    mc = MCConfig(T=cfg["T"], R=cfg["R"], seed=cfg["seed"], jobs=cfg["jobs"], tol=cfg["tol"],
                  max_iter=cfg["max_iter"], mcmc=MCMCConfig(cfg["n_draws"], cfg["n_burn"]))
    rep = run_monte_carlo(mc)
    rep.write_boxplot_csv(cfg["out"] / "mse_boxplot.csv")
    rep.write_truth_csv(cfg["out"] / "mse_truth.csv")
    with open(cfg["out"] / "mse_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "min", "q25", "median", "q75", "max"])
        for m, q in rep.summary().items():
            w.writerow([m, *(format_float(x) for x in q)])
    if rep.skipped:
        logger.warning("%d replications skipped", len(rep.skipped))
    for m, q in rep.summary().items():
        logger.info("%-8s median MSE %.6f", m, q[2])


def cmd_grid(cfg) -> None:
    from vbsv.prior import default_grid, grid_search

    data = load_data(cfg)
    try:
        k1 = [float(x) for x in cfg["kappa1_grid"].split(",")]
        k2 = [float(x) for x in cfg["kappa2_grid"].split(",")]
    except ValueError:
        raise ConfigError("grid lists must be comma-separated numbers") from None
    best, table = grid_search(data, default_grid(k1, k2), cfg["lags"], _options(cfg), jobs=cfg["jobs"],
                              level_data=cfg["level_data"])
    with open(cfg["out"] / "elbo_grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kappa1", "kappa2", "elbo"])
        for k1, k2, e in table:
            w.writerow([format_float(k1), format_float(k2), format_float(e)])
    logger.info("best kappa1=%g kappa2=%g", best.kappa1, best.kappa2)


def parse_sizes(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        try:
            n, T = item.lower().split("x")
            out.append((int(n), int(T)))
        except ValueError:
            raise ConfigError(f"bad size {item!r}; expected NxT") from None
    return out


def cmd_timing(cfg) -> None:
    from vbsv.harness import run_timing, write_timing_csv

    rows = run_timing(parse_sizes(cfg["sizes"]), p=cfg["lags"], seed=cfg["seed"])
    write_timing_csv(rows, cfg["out"] / "timing.csv")


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "connect": cmd_connect,
    "mc": cmd_mc,
    "grid": cmd_grid,
    "timing": cmd_timing,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        cfg["out"].mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore", RuntimeWarning)
            COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"vbsv: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, KeyError, UnicodeDecodeError) as exc:
        print(f"vbsv: input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (VBSVError, ArithmeticError, ValueError) as exc:
        print(f"vbsv: numerical or data error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
