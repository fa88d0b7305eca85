"""Time the nearest-neighbour kernels: numba vs the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 64 256 1024] [--batch 16]

Both paths are called directly so one process covers both backends; the
result arrays are checked for exact agreement before timing.
"""
import argparse
import time

import numpy as np

from linshape.kernels import batch_nn_numpy, numba_kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 1024])
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    nb = numba_kernels()["batch_nn"]
    print(f"{'M':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for M in args.sizes:
        A = rng.normal(size=(args.batch, M, 3))
        B = rng.normal(size=(args.batch, M, 3))
        ref, got = batch_nn_numpy(A, B), nb(A, B)   # also triggers compilation
        for r, g in zip(ref, got):
            assert np.array_equal(r, g), "backends disagree"
        t_np = best_of(lambda: batch_nn_numpy(A, B), args.repeat)
        t_nb = best_of(lambda: nb(A, B), args.repeat)
        print(f"{M:>6} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
