"""Compare the compiled and numpy smoothing kernels.

Run with ``python benchmarks/bench_kernels.py [--points N] [--repeat R]``.
"""

import argparse
import time

import numpy as np

from fgcca import smoothing


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--points", type=int, default=200_000)
    p.add_argument("--grid", type=int, default=51)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, args.points)
    y = np.sin(6 * x) + rng.standard_normal(args.points)
    s, t = rng.uniform(0, 1, (2, args.points))
    z = s * t + rng.standard_normal(args.points)
    g = np.linspace(0, 1, args.grid)

    backends = ["python"] + (["cython"] if smoothing.BACKEND == "cython" else [])
    print(f"{args.points} points, grid {args.grid}, best of {args.repeat}")
    results = {}
    for b in backends:
        t1, m1 = best_of(lambda: smoothing.moments_1d(x, y, g, 0.05, backend=b), args.repeat)
        t2, m2 = best_of(lambda: smoothing.moments_2d(s, t, z, g, g, 0.1, 0.1, backend=b), args.repeat)
        results[b] = (m1, m2)
        print(f"  {b:7s} 1-D {t1 * 1e3:9.1f} ms   2-D {t2 * 1e3:9.1f} ms")
    if len(results) == 2:
        d1 = np.max(np.abs(results["cython"][0] - results["python"][0]))
        d2 = np.max(np.abs(results["cython"][1] - results["python"][1]))
        print(f"  max abs difference: 1-D {d1:.2e}, 2-D {d2:.2e}")
    else:
        print("  compiled backend unavailable; build with 'pip install -e . --no-build-isolation'")


if __name__ == "__main__":
    main()
