#!/usr/bin/env python3
"""Benchmark the greedy-selection kernel backends.

Runs the full greedy loop (alpha=1, keep half the nodes) on random
second-moment matrices of growing width, once with the compiled extension
and once with the NumPy fallback, and checks that the two backends select
identical subsets.

Usage:
  python benchmarks/bench_greedy.py [--sizes 64 128 256 512 1024] [--repeats 3]
"""

import argparse
import importlib
import time

import numpy as np

from specprune import _greedy_pure
from specprune import spectral as sp

try:
    from specprune import _greedy_core
except ImportError:
    _greedy_core = None


def run_backend(module, sigma, keep):
    """Time one full greedy run through the given kernel module."""
    import specprune.backend as backend
    saved = (backend.residual_init, backend.residual_update)
    backend.residual_init = module.residual_init
    backend.residual_update = module.residual_update
    try:
        t0 = time.perf_counter()
        plan = sp.find_subset(sigma, sp.GreedyConfig(alpha=1.0, max_cardinality=keep))
        dt = time.perf_counter() - t0
    finally:
        backend.residual_init, backend.residual_update = saved
    return dt, plan


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+",
                        default=[64, 128, 256, 512, 1024])
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    if _greedy_core is None:
        print("compiled extension not available; timing the NumPy fallback only")
    header = f"{'m':>6} {'keep':>6} {'numpy (ms)':>12}"
    if _greedy_core is not None:
        header += f" {'cython (ms)':>12} {'speedup':>8}"
    print(header)

    rng = np.random.default_rng(0)
    for m in args.sizes:
        a = rng.normal(size=(4 * m, m))
        sigma = a.T @ a / (4 * m)
        keep = m // 2
        t_np = min(run_backend(_greedy_pure, sigma, keep)[0]
                   for _ in range(args.repeats)) * 1e3
        line = f"{m:>6} {keep:>6} {t_np:>12.2f}"
        if _greedy_core is not None:
            t_cy, plan_cy = min(((run_backend(_greedy_core, sigma, keep))
                                 for _ in range(args.repeats)), key=lambda x: x[0])
            t_cy *= 1e3
            plan_np = run_backend(_greedy_pure, sigma, keep)[1]
            assert plan_cy.selected == plan_np.selected, "backends disagree"
            line += f" {t_cy:>12.2f} {t_np / t_cy:>8.2f}x"
        print(line)


if __name__ == "__main__":
    main()
