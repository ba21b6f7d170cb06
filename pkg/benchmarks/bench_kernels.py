"""Benchmark the numba kernels against their pure-numpy twins.

Usage:
    python benchmarks/bench_kernels.py [--repeats 5]

Times the three hot kernels (forest split scan, tree traversal, lasso
coordinate descent) plus an end-to-end forest fit. Both twins are imported
directly, so no environment juggling is needed; HETEO_DISABLE_NUMBA only
controls which twin the library itself dispatches to.
"""

import argparse
import time

import numpy as np

from heteo._backend import NUMBA_ENABLED
from heteo._kernels import (
    _cd_lasso_nb,
    _cd_lasso_np,
    _split_scan_nb,
    _split_scan_np,
    _traverse_nb,
    _traverse_np,
)


def timeit(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_split_scan(repeats):
    rng = np.random.default_rng(0)
    n_s, n_e, m = 500, 500, 20
    xs = np.ascontiguousarray(rng.normal(size=(n_s, m)))
    xe = np.ascontiguousarray(rng.normal(size=(n_e, m)))
    ws = rng.integers(0, 2, size=n_s)
    we = rng.integers(0, 2, size=n_e)
    ys = rng.normal(size=n_s)
    args = (xs, ws, ys, xe, we, 5, 5, 0.0)
    if NUMBA_ENABLED:
        _split_scan_nb(*args)  # compile
        t_nb = timeit(_split_scan_nb, *args, repeats=repeats)
    else:
        t_nb = None
    t_np = timeit(_split_scan_np, *args, repeats=repeats)
    return "split_scan (500x20 node)", t_nb, t_np


def bench_traverse(repeats):
    rng = np.random.default_rng(1)
    depth = 10
    n_nodes = 2 ** (depth + 1) - 1
    feature = np.where(np.arange(n_nodes) < 2**depth - 1,
                       rng.integers(0, 20, size=n_nodes), -1).astype(np.int64)
    threshold = rng.normal(size=n_nodes)
    left = np.arange(1, 2 * n_nodes, 2, dtype=np.int64) % n_nodes
    right = np.arange(2, 2 * n_nodes + 1, 2, dtype=np.int64) % n_nodes
    tau = rng.normal(size=n_nodes)
    X = rng.normal(size=(20_000, 20))
    args = (feature, threshold, left, right, tau, X)
    if NUMBA_ENABLED:
        _traverse_nb(*args)
        t_nb = timeit(_traverse_nb, *args, repeats=repeats)
    else:
        t_nb = None
    t_np = timeit(_traverse_np, *args, repeats=repeats)
    return "traverse (20k units, depth-10 tree)", t_nb, t_np


def bench_cd_lasso(repeats):
    rng = np.random.default_rng(2)
    n, d = 2000, 100
    X = rng.normal(size=(n, d))
    beta = np.zeros(d)
    beta[:5] = rng.normal(size=5)
    z = rng.integers(0, 2, size=n) - 0.5
    u = X @ beta + 0.1 * rng.normal(size=n)
    v = z * z
    lam = 10.0
    args = (X, u, v, lam, np.zeros(d), 0.0, 1e-8, 10_000)
    if NUMBA_ENABLED:
        _cd_lasso_nb(*args)
        t_nb = timeit(_cd_lasso_nb, *args, repeats=repeats)
    else:
        t_nb = None
    t_np = timeit(_cd_lasso_np, *args, repeats=repeats)
    return "cd_lasso (2000x100)", t_nb, t_np


def bench_forest_fit(repeats):
    from heteo.cate import CausalForestSpec, fit_causal_forest

    rng = np.random.default_rng(3)
    n, d = 1000, 50
    X = rng.normal(size=(n, d))
    W = rng.integers(0, 2, size=n)
    Y = np.sign(X[:, 0]) * W + 0.1 * rng.normal(size=n)
    spec = CausalForestSpec(n_trees=50, seed=0)

    t = timeit(fit_causal_forest, X, W, Y, spec, repeats=max(1, repeats // 2))
    label = "numba" if NUMBA_ENABLED else "numpy"
    return f"fit_causal_forest 50 trees ({label} dispatch)", t


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"numba available: {NUMBA_ENABLED}")
    print(f"{'kernel':<40s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for bench in (bench_split_scan, bench_traverse, bench_cd_lasso):
        name, t_nb, t_np = bench(args.repeats)
        nb = f"{t_nb * 1e3:.2f}ms" if t_nb is not None else "n/a"
        ratio = f"{t_np / t_nb:.1f}x" if t_nb else "-"
        print(f"{name:<40s} {nb:>10s} {t_np * 1e3:>8.2f}ms {ratio:>8s}")
    name, t = bench_forest_fit(args.repeats)
    print(f"{name:<40s} {t:.2f}s")


if __name__ == "__main__":
    main()
