"""Compiled kernels versus the numpy fallback.

Times matmul, batched matmul and FCF relaxation on both backends and writes
``backend,kernel,size,median_ms,ratio`` rows (ratio = python / compiled).

    python benchmarks/bench_backends.py --out runs/backends.csv
"""
import argparse
import csv
import statistics
import time

import numpy as np

from layerpar import _backend
from layerpar.mgrit import relaxation_workload


def median_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def cases(kernels, rng):
    a, b = rng.standard_normal((128, 64)), rng.standard_normal((64, 128))
    x, y = rng.standard_normal((16, 32, 16)), rng.standard_normal((16, 16, 32))
    relax = relaxation_workload(256, 1 << 14, kernels=kernels)["fcf_relax"]
    return [
        ("matmul", "128x64x128", lambda: kernels.matmul(a, b)),
        ("bmm", "16x32x16x32", lambda: kernels.bmm(x, y)),
        ("fcf_relax", "256x16384", lambda: relax(None)),
    ]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="backends.csv")
    args = p.parse_args(argv)
    if "compiled" not in _backend.available():
        raise SystemExit("compiled kernels are not built; run pip install -e .")
    results = {}
    for name in ("compiled", "python"):
        for kernel, size, fn in cases(_backend.get(name), np.random.default_rng(0)):
            results[name, kernel] = (size, median_ms(fn, args.repeats))
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["backend", "kernel", "size", "median_ms", "ratio"])
        for (name, kernel), (size, ms) in results.items():
            ratio = results["python", kernel][1] / results["compiled", kernel][1]
            w.writerow([name, kernel, size, f"{ms:.4f}", f"{ratio:.3f}" if name == "python" else "1.000"])
            print(f"{name:9s} {kernel:10s} {size:12s} {ms:9.3f} ms")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
