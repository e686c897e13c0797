#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py
Set GDNSQ_NUMBA=0 to confirm the package works without numba at all;
this script imports both paths explicitly, so the env flag does not
change what it measures.

Matrix products are np.dot (BLAS) in both paths and are listed only as a
baseline for scale.
"""

import time

import numpy as np

from gdnsq import kernels


def best_of(fn, repeats=7):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def row(name, numpy_fn, numba_fn):
    t_np = best_of(numpy_fn)
    if numba_fn is None:
        print(f"{name:<38}{t_np * 1e3:>10.3f} ms {'-':>12}")
        return
    numba_fn()  # compile outside the timed region
    t_nb = best_of(numba_fn)
    print(f"{name:<38}{t_np * 1e3:>10.3f} ms {t_nb * 1e3:>9.3f} ms "
          f"{t_np / t_nb:>7.2f}x")


def main():
    rng = np.random.default_rng(0)
    print(f"numba available: {kernels.HAS_NUMBA} "
          f"(selected: {'numba' if kernels.HAS_NUMBA else 'numpy'})")
    print(f"{'kernel':<38}{'numpy':>13}{'numba':>12}{'speedup':>8}")

    x = rng.normal(size=(16, 8, 32, 32))
    w = rng.normal(size=(16, 8, 3, 3))
    row("conv2d forward 16x8x32x32 k3",
        lambda: kernels.conv2d_forward_numpy(x, w, 1, 1),
        (lambda: kernels.conv2d_forward_numba(x, w, 1, 1))
        if kernels.HAS_NUMBA else None)

    g = rng.normal(size=(16, 16, 32, 32))
    row("conv2d backward-input",
        lambda: kernels.conv2d_backward_input_numpy(g, w, x.shape, 1, 1),
        (lambda: kernels.conv2d_backward_input_numba(g, w, x.shape, 1, 1))
        if kernels.HAS_NUMBA else None)
    row("conv2d backward-weight",
        lambda: kernels.conv2d_backward_weight_numpy(g, x, w.shape, 1, 1),
        (lambda: kernels.conv2d_backward_weight_numba(g, x, w.shape, 1, 1))
        if kernels.HAS_NUMBA else None)

    big = rng.normal(size=2_000_000)
    row("fake-quant elementwise 2e6",
        lambda: kernels.fake_quant_numpy(big, -1.0, 1.0, 0.1),
        (lambda: kernels.fake_quant_numba(big, -1.0, 1.0, 0.1))
        if kernels.HAS_NUMBA else None)

    a = rng.normal(size=(512, 512))
    b = rng.normal(size=(512, 512))
    t = best_of(lambda: a @ b)
    print(f"{'matmul 512x512 (BLAS, both paths)':<38}{t * 1e3:>10.3f} ms")


if __name__ == "__main__":
    main()
