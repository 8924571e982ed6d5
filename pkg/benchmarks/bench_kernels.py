"""Time the jitted kernels against their numpy/interpreted twins.

Both variants are importable regardless of which one the package selected
at import time, so this script always compares the pair. With
GEOPOOL_NO_NUMBA=1 the jitted names alias the fallbacks and the ratios
collapse to ~1.

Usage: python3 benchmarks/bench_kernels.py [--points N] [--iters I]
"""

import argparse
import time

import numpy as np

from geopool import _kernels as K


def timeit(fn, iters):
    fn()  # warm (and trigger JIT compilation the first time)
    t0 = time.perf_counter()
    for _ in range(iters):
        fn()
    return (time.perf_counter() - t0) / iters * 1e3  # ms


def bench_pair(name, fast, slow, iters):
    a = timeit(fast, iters)
    b = timeit(slow, iters)
    print(f"{name:14s} numba {a:9.3f} ms   numpy {b:9.3f} ms   x{b / a:5.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=100_000)
    ap.add_argument("--iters", type=int, default=5)
    ap.add_argument("--k", type=int, default=16)
    ap.add_argument("--channels", type=int, default=32)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n, c = args.points, args.channels
    pts = rng.uniform(0, 4.0, size=(n, 3))
    feats = rng.normal(size=(n, c))

    print(f"live backend: {K.backend()}   n={n} k={args.k} channels={c}")

    # scatter-add: n rows folded into n//8 bins
    bins = n // 8
    idx = rng.integers(0, bins, size=n)
    out = np.zeros((bins, c))
    bench_pair("scatter_add",
               lambda: K.scatter_add(out, feats, idx),
               lambda: K.scatter_add_numpy(out, feats, idx),
               args.iters)

    # group max over kNN lists (flat CSR of n groups x k members)
    flat = rng.integers(0, n, size=n * args.k)
    starts = np.arange(0, n * args.k + 1, args.k, dtype=np.int64)
    bench_pair("group_max_csr",
               lambda: K.group_max_csr(feats, flat, starts),
               lambda: K.group_max_csr_numpy(feats, flat, starts),
               args.iters)

    cell = 4.0 / max(1.0, (n / 8.0) ** (1 / 3))
    bench_pair("grid_knn",
               lambda: K.grid_knn(pts, args.k, cell),
               lambda: K.grid_knn_python(pts, args.k, cell),
               max(1, args.iters // 5))


if __name__ == "__main__":
    main()
