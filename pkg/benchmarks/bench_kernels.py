"""Timing of the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Part one times each kernel pair in-process.  Part two runs the same RANSAC
workload in two subprocesses, one with NGRANSAC_DISABLE_NUMBA=1, so the
end-to-end effect of the flag is visible.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ngransac import _accel, kernels

END_TO_END = """
import time
from ngransac.bench import BenchMatrix, run_cell
m = BenchMatrix(methods=("ransac",), budgets=(200,), seeds=tuple(range(20)), n_correspondences=2000)
run_cell(m.cells()[0], m)  # compile / warm up
t = time.perf_counter()
for c in m.cells():
    run_cell(c, m)
print(f"{1000 * (time.perf_counter() - t) / len(m.cells()):.1f}")
"""


def kernel_cases(rng):
    models = rng.normal(size=(200, 3, 3))
    corrs = rng.uniform(-1, 1, (2000, 4))
    res = rng.uniform(0, 0.1, (200, 2000))
    lines = rng.normal(size=(1000, 3))
    points = rng.uniform(0, 1, (2000, 2))
    x = rng.normal(size=(2000, 32))
    w = rng.normal(size=(32, 32))
    b = rng.normal(size=32)
    return [
        ("epipolar_residuals 200x2000", "epipolar_residuals", (models, corrs)),
        ("line_residuals 1000x2000", "line_residuals", (lines, points)),
        ("hard_counts 200x2000", "hard_counts", (res, 0.05)),
        ("soft_scores 200x2000", "soft_scores", (res, 0.1, 100.0, 0.05)),
        ("dense 2000x32x32", "dense", (x, w, b)),
        ("invariant_colsum 2000x32", "invariant_colsum", (x,)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _accel.USE_NUMBA:
        sys.exit("numba is disabled or missing; unset NGRANSAC_DISABLE_NUMBA to compare")

    print(f"{'kernel':<30}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, name, inputs in kernel_cases(np.random.default_rng(0)):
        np_fn = getattr(kernels, name + "_np")
        nb_fn = getattr(kernels, name + "_nb")
        nb_fn(*inputs)  # compile outside the timing
        t_np = min(timeit.repeat(lambda: np_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<30}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x")

    print("\nend to end: essential RANSAC, n=2000, M=200, ms per scene")
    for flag in ("0", "1"):
        env = dict(os.environ, NGRANSAC_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
        print(f"  {'numpy' if flag == '1' else 'numba':<6}{out.stdout.strip():>8}")


if __name__ == "__main__":
    main()
