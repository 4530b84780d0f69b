"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

The first numba call (JIT compile or cache load) is timed separately.
"""

import argparse
import time

import numpy as np

from tm_diffuse import _accel


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    # EM over a Geant-sized routing matrix and one window
    A = (rng.random((74, 529)) < 0.05).astype(float)
    X = rng.random((529, 12))
    Y = A @ rng.random((529, 12))
    yield "em_refine 74x529, 12 steps, 50 iters", lambda u: _accel.em_refine(X, A, Y, 50, use_numba=u)
    # MMD kernel sum at the desk synth size
    S = rng.random((672, 432))
    R = rng.random((672, 432))
    yield "kernel sum 672x672, d=432", lambda u: _accel.gaussian_kernel_sum(S, R, 0.01, False, use_numba=u)
    yield "kernel sum 672 self, d=432", lambda u: _accel.gaussian_kernel_sum(S, S, 0.01, True, use_numba=u)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.NUMBA_AVAILABLE:
        print("numba is not installed; nothing to compare")
        return
    print(f"{'case':40s} {'numpy':>10s} {'numba':>10s} {'first':>10s} {'speedup':>8s}")
    for name, fn in cases():
        start = time.perf_counter()
        fn(True)
        first = time.perf_counter() - start
        t_np = best_of(lambda: fn(False), args.repeat)
        t_nb = best_of(lambda: fn(True), args.repeat)
        print(f"{name:40s} {t_np:10.4f} {t_nb:10.4f} {first:10.4f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
