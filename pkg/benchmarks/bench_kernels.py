"""Compare the compiled bilinear gather/scatter kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes mirror the deformable attention reads of the default configuration:
one box-encoder layer over 2 queries (G = 2 x 8 heads, a 32 x 32 grid,
16 channels per head, 1024 tokens x 4 points).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from mfdetr import kernels


def _time(fn, repeat: int) -> float:
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--groups", type=int, default=16)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--points", type=int, default=4096)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    G, S, C, P = args.groups, args.size, args.channels, args.points
    value = rng.normal(size=(G, S, S, C))
    pts = rng.uniform(-1, S + 1, size=(G, P, 2))
    gout = rng.normal(size=(G, P, C))

    backends = kernels.available_backends()
    results = {}
    for name in backends:
        with kernels.use_backend(name):
            fwd = _time(lambda: kernels.gather(value, pts), args.repeat)
            bwd = _time(lambda: kernels.scatter(value, pts, gout, True), args.repeat)
            results[name] = (fwd, bwd, kernels.gather(value, pts), kernels.scatter(value, pts, gout, True))
        print(f"{name:<8} gather {fwd * 1e3:8.2f} ms   scatter {bwd * 1e3:8.2f} ms")
    if len(results) == 2:
        (a, b) = results.values()
        diff = max(np.abs(a[2] - b[2]).max(), np.abs(a[3][0] - b[3][0]).max(), np.abs(a[3][1] - b[3][1]).max())
        speed = (b[0] + b[1]) / (a[0] + a[1])
        names = list(results)
        print(f"max abs difference {diff:.2e}; {names[0]} is {speed:.1f}x faster than {names[1]}")


if __name__ == "__main__":
    main()
