#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the two hot kernels (pair loss/gradients against low-rank factors and
against the bare base weights) plus the FNV-1a content hash at a few problem
sizes, and prints median per-call times with the speedup.  The numba columns
include a warmup call so JIT compilation is not billed to the measurement.

Usage:
    python benchmarks/bench_backends.py [--repeats 200]
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from dithub import kernels
from dithub.rng import Rng


def make_instance(seed: int, n: int, c: int, d: int, r: int):
    rng = Rng(seed)
    return (
        rng.normal((d, d)),
        rng.normal((r, d), sigma=0.3),
        rng.normal((d, r), sigma=0.3),
        rng.normal((c, d)),
        rng.normal((n, d)),
        (rng.uniform((n, c)) < 0.4).astype(np.float64),
    )


def time_call(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times) * 1e6  # microseconds


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    try:
        kernels.set_backend("numba")
        have_numba = True
    except ImportError:
        have_numba = False
        print("numba is not importable; showing numpy-only timings")
    kernels.set_backend("numpy")

    sizes = [
        ("batch 32, 4 classes, d=32, r=4", dict(n=32, c=4, d=32, r=4)),
        ("batch 128, 8 classes, d=32, r=4", dict(n=128, c=8, d=32, r=4)),
        ("batch 64, 4 classes, d=64, r=8", dict(n=64, c=4, d=64, r=8)),
    ]
    print(f"{'kernel / size':<45} {'numpy (us)':>12} {'numba (us)':>12} {'speedup':>9}")
    for label, kw in sizes:
        w, a, b, q, x, y = make_instance(7, **kw)
        for name, call in (
            ("loss_grads_pairs", lambda: kernels.loss_grads_pairs(w, a, b, q, x, y)),
            ("base_loss_grads", lambda: kernels.base_loss_grads(w, q, x, y)),
        ):
            kernels.set_backend("numpy")
            t_np = time_call(call, args.repeats)
            if have_numba:
                kernels.set_backend("numba")
                call()  # warmup / compile
                t_nb = time_call(call, args.repeats)
                print(f"{name + ' | ' + label:<45} {t_np:>12.1f} {t_nb:>12.1f} {t_np / t_nb:>8.1f}x")
            else:
                print(f"{name + ' | ' + label:<45} {t_np:>12.1f} {'-':>12} {'-':>9}")

    for size in (1_024, 65_536):
        payload = bytes(Rng(3).u64(size // 8).tobytes())
        call = lambda: kernels.fnv1a64(payload)
        kernels.set_backend("numpy")
        t_np = time_call(call, max(10, args.repeats // 10))
        label = f"fnv1a64 | {size} bytes"
        if have_numba:
            kernels.set_backend("numba")
            call()
            t_nb = time_call(call, args.repeats)
            print(f"{label:<45} {t_np:>12.1f} {t_nb:>12.1f} {t_np / t_nb:>8.1f}x")
        else:
            print(f"{label:<45} {t_np:>12.1f} {'-':>12} {'-':>9}")

    kernels.set_backend("auto")
    print(f"\nactive backend after auto-select: {kernels.get_backend()}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
