"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Both variants are importable side by side, so one process times both.  The
first numba call (compilation or cache load) is excluded.
"""

import argparse
import time

import numpy as np

from fqtlab import kernels
from fqtlab._accel import HAVE_NUMBA
from fqtlab.quant import fit_block_householder


def best_of(fn, repeat):
    fn()  # warm up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    trials = np.arange(2000, dtype=np.uint64)
    values = rng.uniform(0, 15, (2000, 8 * 16))
    g = rng.standard_normal((256, 64)) * rng.exponential(1.0, (256, 1))
    t = fit_block_householder(g, 4)
    order, starts, s1, s2 = t._layout
    mags = np.sort(np.abs(g).max(axis=1))[::-1].copy()
    ranges = np.ptp(g, axis=1)[np.argsort(-np.abs(g).max(axis=1))].copy()
    yield (
        "uniforms 2000x128",
        lambda: kernels.uniforms_numpy(1, 2, trials, 3, 1, 128),
        lambda: kernels.uniforms_loop(1, 2, trials, 3, 1, 128),
    )
    yield (
        "stochastic rounding 2000x128",
        lambda: kernels.stochastic_round_codes_numpy(values, 1, 2, trials, 3, 1),
        lambda: kernels.stochastic_round_codes_loop(values, 1, 2, trials, 3, 1),
    )
    yield (
        "block Householder 256x64",
        lambda: kernels.block_householder_numpy(g, order, starts, s1, s2, False),
        lambda: kernels.block_householder_loop(g, order, starts, s1, s2, False),
    )
    yield (
        "group count search N=256",
        lambda: kernels.best_group_count_numpy(mags, ranges),
        lambda: kernels.best_group_count_loop(mags, ranges),
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba disabled or missing; the loop kernels run as plain Python")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, ref, fast in cases():
        a = best_of(ref, args.repeat)
        b = best_of(fast, args.repeat)
        print(f"{name:32s} {a * 1e3:10.3f} {b * 1e3:10.3f} {a / b:8.1f}")


if __name__ == "__main__":
    main()
