"""Compare the compiled and pure-Python integration kernels.

Usage: python benchmarks/bench_integrate.py [--duration 60] [--repeat 3]
"""
import argparse
import time

import numpy as np

from fdia.dynamics import simulate
from fdia.grid import builtin_case, solve_power_flow
from fdia.kernels import available_backends


def bench(net, eq, backend, duration, repeat):
    best = float("inf")
    traj = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        traj = simulate(net, duration, seed=1, equilibrium=eq, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, traj


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--duration", type=float, default=60.0, help="simulated seconds per run")
    ap.add_argument("--repeat", type=int, default=3, help="runs per backend; best time is reported")
    args = ap.parse_args()
    net = builtin_case("ieee39")
    eq = solve_power_flow(net)
    steps = int(round(args.duration * 600))
    results = {}
    for backend in available_backends():
        t, traj = bench(net, eq, backend, args.duration, args.repeat)
        results[backend] = (t, traj)
        print(f"{backend:>8}: {t:8.3f} s for {steps} steps ({steps / t / 1e3:8.1f} k steps/s)")
    if {"cython", "python"} <= results.keys():
        tc, a = results["cython"]
        tp, b = results["python"]
        diff = max(np.max(np.abs(a.angles - b.angles)), np.max(np.abs(a.magnitudes - b.magnitudes)))
        print(f" speedup: {tp / tc:.1f}x; max |state difference| = {diff:.2e}")
    else:
        print("compiled kernel unavailable; only the fallback was timed")


if __name__ == "__main__":
    main()
