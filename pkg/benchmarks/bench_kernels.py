"""Time each hot kernel on the compiled and the numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N wall time per backend and the
speedup. Inputs are sized like the ones the learners and planner produce.
"""
import argparse
import time

import numpy as np

from mfclin import kernels
from mfclin.simplex import build_grid


def cases(rng):
    grid = build_grid(3, 40)
    pts = rng.dirichlet(np.ones(3), 20_000)
    yield "nearest_rep", lambda b: kernels.nearest_rep(pts, grid.representatives, backend=b)

    cdf = np.cumsum(rng.dirichlet(np.ones(4), 500), axis=1)
    rows = rng.integers(0, 500, 200_000)
    u = rng.random(200_000)
    yield "sample_inverse_cdf", lambda b: kernels.sample_inverse_cdf(cdf, rows, u, backend=b)

    S, A = 2_000, 64
    stage = rng.random((S, A))
    nxt = rng.integers(0, S, (S, A))
    V = rng.random(S)
    yield "bellman_sweep", lambda b: kernels.bellman_sweep(stage, nxt, V, 0.9, backend=b)

    T, d, n = 100_000, 3, 2
    xu = rng.integers(0, 4, T)
    phi = rng.dirichlet(np.ones(d), T)
    cost = rng.random(T)
    nx = rng.integers(0, n, T)

    def sa(b):
        theta = np.zeros((4, d))
        q = np.zeros((4, d, n))
        visits = np.zeros(4, dtype=np.int64)
        kernels.linear_sa(theta, q, visits, xu, phi, cost, nx, backend=b)

    yield "linear_sa", sa

    K = rng.random((100_000, 2))
    H = rng.random(100_000)
    yield "sgd_quadratic", lambda b: kernels.sgd_quadratic(K, H, np.zeros(2), backend=b)


def best_of(fn, repeat):
    fn()  # warm up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = sorted(kernels.BACKENDS)
    print(f"backends available: {', '.join(backends)} (active: {kernels.BACKEND})")
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)):
        t = {b: best_of(lambda b=b: fn(b), args.repeat) for b in backends}
        line = f"{name:<20}" + "".join(f"{t[b] * 1e3:>10.2f}ms" for b in backends)
        if "compiled" in t:
            line += f"{t['python'] / t['compiled']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
