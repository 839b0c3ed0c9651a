"""Compare the compiled and pure-Python band kernels.

    python benchmarks/bench_band.py [--sizes 100,300,1000,3000] [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from vbsv import band
from vbsv.band import BandSymMatrix, build_hth


def problem(T: int) -> BandSymMatrix:
    rng = np.random.default_rng(T)
    return build_hth(T).scale(10.0).add_diagonal(rng.uniform(0.1, 2.0, T))


def bench(T: int, backend: str, repeat: int) -> dict[str, float]:
    a = problem(T)
    f = band.band_cholesky(a, backend)
    rhs = np.ones(T)
    ops = {
        "cholesky": lambda: band.band_cholesky(a, backend),
        "solve": lambda: band.band_solve(f, rhs, backend),
        "selinv": lambda: band.band_selected_inverse(f, backend),
    }
    return {k: min(timeit.repeat(fn, number=1, repeat=repeat)) for k, fn in ops.items()}


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="100,300,1000,3000")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = ["python"] + (["compiled"] if band.BACKEND == "compiled" else [])
    print(f"{'T':>6} {'op':<9} " + " ".join(f"{b + ' ms':>12}" for b in backends) + "   speedup")
    for T in (int(s) for s in args.sizes.split(",")):
        res = {b: bench(T, b, args.repeat) for b in backends}
        for op in res["python"]:
            cells = " ".join(f"{1e3 * res[b][op]:12.4f}" for b in backends)
            speed = f"{res['python'][op] / res['compiled'][op]:9.1f}x" if "compiled" in res else ""
            print(f"{T:>6} {op:<9} {cells} {speed}")


if __name__ == "__main__":
    main()
