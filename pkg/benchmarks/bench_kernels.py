"""Time the numba and numpy statistics kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The first numba call per signature includes compilation (or a cache load);
it is reported separately and excluded from the per-call figures.
"""

import argparse
import time

import numpy as np

from fedsim import kernels


def _cases(rng):
    ranks = np.arange(1, 17, dtype=np.float64)
    a = np.sort(rng.standard_normal(20_000))
    b = np.sort(rng.standard_normal(20_000) + 0.1)
    scores = np.round(rng.random(200_000), 3)
    labels = (rng.random(200_000) < 0.4).astype(np.int64)
    return {
        "subset_sums (n=16, k=8)": ("subset_sums", (ranks, 8)),
        "ks_statistic (2 x 20k)": ("ks_statistic", (a, b)),
        "auc (200k, tied scores)": ("auc", (scores, labels)),
    }


def _time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'first call ms':>14s}")
    for label, (name, inputs) in _cases(rng).items():
        fast = kernels.BACKENDS["numba"][name]
        slow = kernels.BACKENDS["numpy"][name]
        t0 = time.perf_counter()
        first = fast(*inputs)
        warm = time.perf_counter() - t0
        ref = slow(*inputs)
        if not np.array_equal(np.asarray(first), np.asarray(ref)):
            raise SystemExit(f"{name}: backends disagree")
        t_np = _time(slow, inputs, args.repeat)
        t_nb = _time(fast, inputs, args.repeat)
        print(f"{label:28s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.1f}x {warm * 1e3:14.1f}")


if __name__ == "__main__":
    main()
