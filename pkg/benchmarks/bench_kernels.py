"""Benchmark the compiled kernels against the pure-Python fallback.

Run after building the extension in place:

    python setup.py build_ext --inplace
    python benchmarks/bench_kernels.py
"""

import random
import time

from livemesh._kernels import _pure

try:
    from livemesh._kernels import _fast
except ImportError:
    _fast = None


def time_fn(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_curve_index(mod, order=8, n=200_000):
    side = 1 << order
    rng = random.Random(1)
    cells = [(rng.randrange(side), rng.randrange(side)) for _ in range(n)]

    def run():
        f = mod.curve_index
        for x, y in cells:
            f(order, x, y)

    return time_fn(run)


def bench_curve_point(mod, order=8, n=200_000):
    rng = random.Random(2)
    keys = [rng.randrange(1 << (2 * order)) for _ in range(n)]

    def run():
        f = mod.curve_point
        for k in keys:
            f(order, k)

    return time_fn(run)


def bench_assign(mod, n=20_000):
    rng = random.Random(3)
    cases = []
    for _ in range(200):
        n_slots = 40
        n_nbr = 8
        deadlines = [rng.uniform(0, 10_000) for _ in range(n_slots)]
        have = [rng.getrandbits(n_slots) for _ in range(n_nbr)]
        delays = [rng.uniform(1, 150) for _ in range(n_nbr)]
        caps = [4] * n_nbr
        cases.append((deadlines, have, delays, caps))

    def run():
        f = mod.assign_sources
        for _ in range(n // 200):
            for deadlines, have, delays, caps in cases:
                f(deadlines, have, delays, [0] * len(caps), caps, 500.0, 60.0)

    return time_fn(run)


def main():
    rows = []
    for name, bench in (
        ("curve_index (200k calls, order 8)", bench_curve_index),
        ("curve_point (200k calls, order 8)", bench_curve_point),
        ("assign_sources (20k calls, 40x8)", bench_assign),
    ):
        pure_s = bench(_pure)
        if _fast is not None:
            fast_s = bench(_fast)
            rows.append((name, pure_s, fast_s, pure_s / fast_s))
        else:
            rows.append((name, pure_s, None, None))

    print(f"{'benchmark':38s} {'pure':>10s} {'cython':>10s} {'speedup':>9s}")
    for name, pure_s, fast_s, ratio in rows:
        if fast_s is None:
            print(f"{name:38s} {pure_s * 1e3:9.1f}ms {'n/a':>10s} {'n/a':>9s}")
        else:
            print(f"{name:38s} {pure_s * 1e3:9.1f}ms {fast_s * 1e3:9.1f}ms {ratio:8.1f}x")
    if _fast is None:
        print("\ncompiled extension not built; showing the fallback only")


if __name__ == "__main__":
    main()
