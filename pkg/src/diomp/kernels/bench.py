"""Compares the compiled kernel core against the numpy fallback.

Run with `python -m diomp.kernels.bench [--grid N] [--n N] [--reps K]`.
Prints one CSV row per (kernel, backend) with throughput, and verifies the
backends agree bitwise before timing.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import backends


def _time(fn, reps: int) -> float:
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(grid: int = 64, n: int = 192, reps: int = 3, out=sys.stdout) -> int:
    impls = backends()
    rng = np.random.default_rng(7)
    r = 4
    shape = (grid + 2 * r,) * 3
    u_cur = rng.uniform(-1, 1, shape)
    u_prev = rng.uniform(-1, 1, shape)
    w = rng.uniform(-1, 1, r + 1)
    results = {}
    rows = []
    for name, impl in impls.items():
        u_next = np.zeros(shape)
        impl.stencil_update(u_next, u_cur, u_prev, -2.5, w, w, w, r)
        results[name] = u_next
        secs = _time(lambda: impl.stencil_update(u_next, u_cur, u_prev,
                                                 -2.5, w, w, w, r), reps)
        mlups = grid ** 3 / secs / 1e6
        rows.append(("stencil", name, f"{secs * 1e3:.2f}", f"{mlups:.1f}"))
    if len(results) == 2 and not np.array_equal(results["py"], results["cy"]):
        print("BACKEND MISMATCH: stencil results differ", file=sys.stderr)
        return 1

    a = rng.uniform(-1, 1, (n, n))
    b = rng.uniform(-1, 1, (n, n))
    mm = {}
    for name, impl in impls.items():
        c = np.zeros((n, n))
        impl.matmul_f64(a, b, c)
        mm[name] = c
        secs = _time(lambda: impl.matmul_f64(a, b, c), reps)
        gflops = 2 * n ** 3 / secs / 1e9
        rows.append(("matmul", name, f"{secs * 1e3:.2f}", f"{gflops:.2f}"))
    if len(mm) == 2 and not np.array_equal(mm["py"], mm["cy"]):
        print("BACKEND MISMATCH: matmul results differ", file=sys.stderr)
        return 1

    print("kernel,backend,best_ms,throughput", file=out)
    for row in rows:
        print(",".join(row), file=out)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", type=int, default=64)
    ap.add_argument("--n", type=int, default=192)
    ap.add_argument("--reps", type=int, default=3)
    args = ap.parse_args(argv)
    return run(args.grid, args.n, args.reps)


if __name__ == "__main__":
    sys.exit(main())
