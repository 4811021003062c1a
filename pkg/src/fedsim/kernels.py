"""Inner loops of the statistics stack, in two interchangeable flavours.

Each kernel exists as an explicit loop compiled by numba and as a vectorized
numpy routine. Both return bit-identical results; which one the public
functions use is decided once at import time (see :mod:`fedsim._accel`).
"""

import itertools
from math import comb

import numpy as np

from ._accel import USE_NUMBA, njit


# -- subset rank sums (exact Mann-Whitney null distribution) -----------------

@njit
def _subset_sums_numba(values, k):
    n = values.shape[0]
    total = 1
    for i in range(k):
        total = total * (n - i) // (i + 1)
    out = np.empty(total, dtype=np.float64)
    idx = np.arange(k)
    pos = 0
    while True:
        s = 0.0
        for j in range(k):
            s += values[idx[j]]
        out[pos] = s
        pos += 1
        i = k - 1
        while i >= 0 and idx[i] == n - k + i:
            i -= 1
        if i < 0:
            break
        idx[i] += 1
        for j in range(i + 1, k):
            idx[j] = idx[j - 1] + 1
    return out


def _subset_sums_numpy(values, k):
    n = values.shape[0]
    count = comb(n, k)
    flat = itertools.chain.from_iterable(itertools.combinations(range(n), k))
    idx = np.fromiter(flat, dtype=np.intp, count=count * k).reshape(count, k)
    # left-to-right accumulation, matching the compiled loop bit for bit
    out = values[idx[:, 0]].copy()
    for j in range(1, k):
        out += values[idx[:, j]]
    return out


# -- two-sample KS statistic on sorted inputs ---------------------------------

@njit
def _ks_statistic_numba(a, b):
    n = a.shape[0]
    m = b.shape[0]
    i = 0
    j = 0
    d = 0.0
    while i < n and j < m:
        x = min(a[i], b[j])
        while i < n and a[i] <= x:
            i += 1
        while j < m and b[j] <= x:
            j += 1
        diff = abs(i / n - j / m)
        if diff > d:
            d = diff
    return d


def _ks_statistic_numpy(a, b):
    merged = np.concatenate((a, b))
    cdf_a = np.searchsorted(a, merged, side="right") / a.shape[0]
    cdf_b = np.searchsorted(b, merged, side="right") / b.shape[0]
    return float(np.max(np.abs(cdf_a - cdf_b)))


# -- ROC area with grouped ties -----------------------------------------------

@njit
def _auc_sweep(s, y):
    n = s.shape[0]
    tp = 0
    fp = 0
    prev_tp = 0
    prev_fp = 0
    twice_area = 0
    i = 0
    while i < n:
        v = s[i]
        while i < n and s[i] == v:
            if y[i] != 0:
                tp += 1
            else:
                fp += 1
            i += 1
        twice_area += (fp - prev_fp) * (tp + prev_tp)
        prev_tp = tp
        prev_fp = fp
    return twice_area / 2.0 / (tp * fp)


def _auc_numba(scores, labels):
    # numpy's sort beats numba's, so only the sweep is compiled
    order = np.argsort(scores)[::-1]
    return _auc_sweep(scores[order], labels[order])


def _auc_numpy(scores, labels):
    order = np.argsort(scores)[::-1]
    s = scores[order]
    y = labels[order].astype(np.int64)
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    ends = np.flatnonzero(np.diff(s)).tolist() + [s.shape[0] - 1]
    tp = np.concatenate(([0], tps[ends]))
    fp = np.concatenate(([0], fps[ends]))
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / 2.0 / (int(tp[-1]) * int(fp[-1]))


BACKENDS = {
    "numba": {
        "subset_sums": _subset_sums_numba,
        "ks_statistic": _ks_statistic_numba,
        "auc": _auc_numba,
    },
    "numpy": {
        "subset_sums": _subset_sums_numpy,
        "ks_statistic": _ks_statistic_numpy,
        "auc": _auc_numpy,
    },
}

BACKEND = "numba" if USE_NUMBA else "numpy"

subset_sums = BACKENDS[BACKEND]["subset_sums"]
ks_statistic = BACKENDS[BACKEND]["ks_statistic"]
auc = BACKENDS[BACKEND]["auc"]
