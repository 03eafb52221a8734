"""Compare the compiled kernels against the pure numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from spacepointfm import kernels


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_scan(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for t_len, channels in ((256, 256), (1024, 1024), (4096, 1024)):
        for dtype in (np.float32, np.float64):
            a = rng.uniform(0, 1, (t_len, channels)).astype(dtype)
            b = rng.normal(size=(t_len, channels)).astype(dtype)
            g = rng.normal(size=(t_len, channels)).astype(dtype)
            timings = {}
            for name in available():
                backend = kernels.get_backend(name)
                h = backend.scan_forward(a, b)
                timings[name + "_fwd"] = _time(
                    lambda be=backend: be.scan_forward(a, b), repeats)
                timings[name + "_bwd"] = _time(
                    lambda be=backend, hh=h: be.scan_backward(a, hh, g), repeats)
            rows.append((f"{t_len}x{channels}", np.dtype(dtype).name, timings))
    return rows


def bench_lap(repeats):
    rng = np.random.default_rng(1)
    rows = []
    for n in (16, 64, 128):
        cost = np.ascontiguousarray(rng.normal(size=(n, n)))
        timings = {}
        for name in available():
            backend = kernels.get_backend(name)
            timings[name] = _time(lambda be=backend: be.lap_solve(cost), repeats)
        rows.append((f"{n}x{n}", "float64", timings))
    return rows


def available():
    names = ["fallback"]
    if kernels.HAVE_COMPILED:
        names.insert(0, "compiled")
    return names


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    if not kernels.HAVE_COMPILED:
        print("compiled extension unavailable; timing the fallback only")

    print("\nlinear-recurrence scan (seconds, best of repeats):")
    header = None
    for shape, dtype, timings in bench_scan(args.repeats):
        if header is None:
            header = ["shape", "dtype"] + sorted(timings)
            print("  " + "  ".join(f"{h:>14}" for h in header))
        cells = [shape, dtype] + [f"{timings[k]:.6f}" for k in sorted(timings)]
        print("  " + "  ".join(f"{c:>14}" for c in cells))

    print("\nassignment solve (seconds, best of repeats):")
    header = None
    for shape, dtype, timings in bench_lap(args.repeats):
        if header is None:
            header = ["shape", "dtype"] + sorted(timings)
            print("  " + "  ".join(f"{h:>14}" for h in header))
        cells = [shape, dtype] + [f"{timings[k]:.6f}" for k in sorted(timings)]
        print("  " + "  ".join(f"{c:>14}" for c in cells))

    if kernels.HAVE_COMPILED:
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (512, 512))
        b = rng.normal(size=(512, 512))
        same = np.array_equal(kernels.get_backend("compiled").scan_forward(a, b),
                              kernels.get_backend("fallback").scan_forward(a, b))
        print(f"\nbackends bit-identical on a 512x512 scan: {same}")


if __name__ == "__main__":
    main()
