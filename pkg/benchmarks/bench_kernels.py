"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py
The numba column requires numba; without it only the numpy path is timed.
"""

import time

import numpy as np

from ealm import kernels


def bench(fn, *args, repeat=20):
    fn(*args)  # warmup (numba compiles here)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def row(name, np_fn, nb_fn, *args):
    t_np = bench(np_fn, *args)
    if nb_fn is not None:
        t_nb = bench(nb_fn, *args)
        ratio = t_np / t_nb if t_nb > 0 else float("inf")
        print(f"{name:<28} numpy {t_np * 1e3:9.3f} ms   numba {t_nb * 1e3:9.3f} ms"
              f"   speedup {ratio:5.2f}x")
    else:
        print(f"{name:<28} numpy {t_np * 1e3:9.3f} ms   numba       n/a")


def main():
    rng = np.random.default_rng(0)
    print(f"numba available: {kernels.HAS_NUMBA}")

    codes = rng.integers(-8, 8, size=2_000_000).astype(np.int8)
    packed = kernels.pack_nibbles_np(codes)
    w = rng.normal(size=(1024, 4096)).astype(np.float32)
    a = rng.integers(0, 50, size=2000).astype(np.int64)
    b = rng.integers(0, 50, size=2000).astype(np.int64)

    nb = kernels.HAS_NUMBA
    row("pack_nibbles (2M codes)", kernels.pack_nibbles_np,
        kernels._pack_nibbles_nb if nb else None, codes)
    row("unpack_nibbles (2M codes)", kernels.unpack_nibbles_np,
        kernels._unpack_nibbles_nb if nb else None, packed, codes.size)
    row("nm_mask 2:4 (1024x4096)", lambda x: kernels.nm_mask_np(x, 2, 4),
        (lambda x: kernels._nm_mask_nb(x, 2, 4)) if nb else None, w)
    row("lcs_length (2000x2000)", kernels.lcs_length_np,
        kernels.lcs_length_nb if nb else None, a, b)


if __name__ == "__main__":
    main()
