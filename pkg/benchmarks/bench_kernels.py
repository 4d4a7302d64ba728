"""Time the compiled and numpy kernel backends on batch-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from hnpm.kernels import backends

SIZES = [(64, 16), (160, 16), (160, 128), (512, 128)]


def bench(impl, n, d, repeat):
    rng = np.random.default_rng(0)
    a, b, g = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=(n, n))
    dist = impl.pairwise_sqdist(a, b)
    cases = {
        "sqdist": lambda: impl.pairwise_sqdist(a, b),
        "sqdist_backward": lambda: impl.pairwise_sqdist_backward(g, a, b),
        "threshold_mask": lambda: impl.threshold_mask(dist, 1.0, True),
    }
    out = {}
    for name, fn in cases.items():
        number = max(1, int(2e6 // (n * n * d)))
        out[name] = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = backends()
    names = sorted(impls)
    print(f"{'kernel':<16} {'n':>4} {'d':>4} " + " ".join(f"{k + ' (us)':>14}" for k in names) + ("   speedup" if len(names) > 1 else ""))
    for n, d in SIZES:
        timings = {k: bench(impls[k], n, d, args.repeat) for k in names}
        for kernel in timings[names[0]]:
            cells = " ".join(f"{timings[k][kernel] * 1e6:>14.1f}" for k in names)
            extra = ""
            if "cython" in timings:
                extra = f"   {timings['python'][kernel] / timings['cython'][kernel]:>6.2f}x"
            print(f"{kernel:<16} {n:>4} {d:>4} {cells}{extra}")


if __name__ == "__main__":
    main()
