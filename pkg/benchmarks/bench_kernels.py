"""Compare the compiled and numpy kernels on problem sizes seen in practice.

Run ``python benchmarks/bench_kernels.py``. Both backends are checked for
agreement before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from panel_fegmm import kernels


def cases(rng):
    yield ("window_sum_batch one-sided", kernels.window_sum_batch,
           (rng.normal(size=(51, 21, 7)), 2, False))
    yield ("window_sum_batch two-sided", kernels.window_sum_batch,
           (rng.normal(size=(51, 21, 7)), 2, True))
    yield ("window_sum_batch large", kernels.window_sum_batch,
           (rng.normal(size=(500, 200, 10)), 6, True))
    yield ("geometric_filter forward", kernels.geometric_filter,
           (rng.normal(size=(51, 67)), 0.31, 21, 1, True))
    yield ("geometric_filter backward", kernels.geometric_filter,
           (rng.normal(size=(51, 67)), 1 / 1.91, 22, 0, False))
    yield ("geometric_filter large", kernels.geometric_filter,
           (rng.normal(size=(1000, 400)), 0.5, 40, 1, True))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled kernels are not built; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'python (ms)':>12s} {'cython (ms)':>12s} {'speed-up':>9s}")
    for name, fn, a in cases(rng):
        py = fn(*a, backend="python")
        cy = fn(*a, backend="cython")
        np.testing.assert_allclose(cy, py, rtol=1e-12, atol=1e-12)
        n = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*a, backend="python"), number=1), 1e-6)))
        t_py = min(timeit.repeat(lambda: fn(*a, backend="python"), number=n, repeat=args.repeat)) / n
        t_cy = min(timeit.repeat(lambda: fn(*a, backend="cython"), number=n, repeat=args.repeat)) / n
        print(f"{name:32s} {1e3 * t_py:12.4f} {1e3 * t_cy:12.4f} {t_py / t_cy:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
