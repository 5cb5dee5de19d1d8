"""Time the numba kernels against the pure-numpy fallbacks.

Imports both backend modules directly, so the ALTSEG_KERNELS flag is not
consulted here.  The first numba call per kernel compiles; a warmup round
keeps that out of the timings.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from altseg.kernels import numpy_backend

try:
    from altseg.kernels import numba_backend
except ImportError:
    numba_backend = None


def _timed(fn, args, repeats):
    fn(*args)  # warmup; compiles the numba version
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) * 1000 / repeats


def _cases(rng):
    h, w = 64, 96
    c = 16
    x = rng.standard_normal((c, h, w))
    k3 = rng.standard_normal((c, c, 3, 3)) * 0.1
    bias = rng.standard_normal(c)
    gy = rng.standard_normal((c, h, w))
    v = rng.standard_normal((c, h, w))
    q = rng.standard_normal((c, h, w))
    wts = np.full((9, h, w), 1.0 / 9.0)
    pooled = rng.standard_normal((c, 24))
    gwts = np.full((24, h, w), 1.0 / 24.0)
    cur = rng.standard_normal((1, h, w))
    ref = np.roll(cur, (2, -3), axis=(1, 2))
    cand = np.arange(-4, 5, dtype=np.int64)
    return [
        ("conv2d_forward", (x, k3, bias, 1, 1, 1), 20),
        ("conv2d_backward", (x, k3, 1, 1, 1, gy, True), 10),
        ("bilinear_forward", (x, h * 2, w * 2), 50),
        ("bilinear_backward", (gy, h * 2, w * 2), 50),
        ("local_attn_forward", (v, x, q, 3, 0.25), 20),
        ("local_attn_backward", (v, x, q, 3, 0.25, wts, gy), 10),
        ("global_attn_forward", (pooled, pooled, q, 0.25), 20),
        ("global_attn_backward", (pooled, pooled, q, 0.25, gwts, gy), 20),
        ("sad_search", (cur, ref, 8, cand, cand), 10),
    ]


def main():
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>9}")
    for name, args, repeats in _cases(rng):
        np_ms = _timed(getattr(numpy_backend, name), args, repeats)
        if numba_backend is None:
            print(f"{name:<22} {np_ms:>10.3f} {'n/a':>10} {'n/a':>9}")
            continue
        nb_ms = _timed(getattr(numba_backend, name), args, repeats)
        print(f"{name:<22} {np_ms:>10.3f} {nb_ms:>10.3f} {np_ms / nb_ms:>8.1f}x")


if __name__ == "__main__":
    main()
