"""Time the compiled kernels against the numpy fallback, then one full solve per backend.

    python3 benchmarks/bench_kernels.py [--paths 100000] [--repeat 5]
"""
import argparse
import time

import numpy as np

from absdelab import kernels, scenarios
from absdelab.condexp import RegressionBasis
from absdelab.forward import simulate_paths
from absdelab.solver import SolverConfig, solve


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--degree", type=int, default=5)
    ap.add_argument("--skip-solve", action="store_true")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    P, deg = args.paths, args.degree
    z = rng.standard_normal(P)
    T = rng.standard_normal((P, 3))
    coef = rng.standard_normal((deg + 1, 3))
    Y = rng.standard_normal((101, P))
    cases = {
        "poly_gram": lambda: kernels.poly_gram(z, deg),
        "poly_rhs": lambda: kernels.poly_rhs(z, T, deg),
        "poly_eval": lambda: kernels.poly_eval(z, coef),
        "suffix_max_abs": lambda: kernels.suffix_max_abs(Y),
    }
    backends = ["python"]
    try:
        kernels.use_backend("cython")
        backends.append("cython")
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")
    times = {}
    for b in backends:
        kernels.use_backend(b)
        for name, fn in cases.items():
            times[(b, name)] = best_of(fn, args.repeat)
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name in cases:
        row = f"{name:<16}" + "".join(f"{times[(b, name)] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{times[('python', name)] / times[('cython', name)]:>11.1f}x"
        print(row)

    if not args.skip_solve:
        sc = scenarios.build("entropic")
        for b in backends:
            kernels.use_backend(b)
            bundle = simulate_paths(sc.model, sc.grid, sc.marks, (0.0, 0.0), P, 1)
            t = time.perf_counter()
            sol = solve(bundle, sc.driver, SolverConfig(), RegressionBasis(deg))
            print(f"entropic solve [{b}]: {time.perf_counter() - t:.2f}s  Y0={sol.Y0:.10f}")


if __name__ == "__main__":
    main()
