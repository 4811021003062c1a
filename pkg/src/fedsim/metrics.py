"""Classification metrics and the two nonparametric tests used to compare methods."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ArgumentError, UndefinedMetricError

ALPHA = 0.05
EXACT_MWU_MAX_N = 16
_KS_TERM_TOL = 1e-12


@dataclass(frozen=True)
class ScoredPredictions:
    scores: np.ndarray
    labels: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if s.ndim != 1 or s.shape != y.shape or s.size == 0:
            raise ArgumentError("scores and labels must be equally long, non-empty vectors")
        if np.any((y != 0) & (y != 1)):
            raise ArgumentError("labels must be 0 or 1")
        if not np.all(np.isfinite(s)):
            raise ArgumentError("scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    statistic: float
    p_value: float
    method: str
    alternative: str
    reject_at_alpha: bool
    exact: bool = False

    def to_dict(self):
        return {
            "method": self.method,
            "alternative": self.alternative,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "reject_at_alpha": self.reject_at_alpha,
            "exact": self.exact,
        }


def _as_scored(pred, labels=None, threshold=0.5):
    if isinstance(pred, ScoredPredictions):
        return pred
    return ScoredPredictions(pred, labels, threshold)


def accuracy(pred, labels=None, threshold=0.5):
    """Share of rows where ``score >= threshold`` agrees with the label."""
    p = _as_scored(pred, labels, threshold)
    hits = (p.scores >= p.threshold).astype(np.int64) == p.labels
    return float(np.mean(hits))


def auc_roc(pred, labels=None):
    """Trapezoidal ROC area with tied scores swept as one threshold step."""
    p = _as_scored(pred, labels)
    n_pos = int(p.labels.sum())
    if n_pos == 0 or n_pos == p.labels.size:
        raise UndefinedMetricError("AUC-ROC needs both classes present")
    return float(kernels.auc(p.scores, p.labels))


def roc_curve(pred, labels=None):
    """(fpr, tpr) points of the ROC curve, one per distinct score, starting at (0, 0)."""
    p = _as_scored(pred, labels)
    order = np.argsort(p.scores)[::-1]
    s, y = p.scores[order], p.labels[order]
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.r_[0, np.cumsum(y)[ends]]
    fps = np.r_[0, np.cumsum(1 - y)[ends]]
    return fps / max(fps[-1], 1), tps / max(tps[-1], 1)


def _sample(x, name):
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ArgumentError(f"sample {name!r} is empty")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"sample {name!r} has non-finite values")
    return arr


def midranks(x):
    """1-based ranks with ties given their average rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    return (upper - (counts - 1) / 2.0)[inverse]


def mann_whitney_u(a, b, alternative="two_sided", method="auto"):
    """Mann-Whitney U for sample ``a`` against ``b``.

    U counts pairs with ``a_i > b_j`` plus half of the ties. With
    ``method="auto"`` the p-value comes from enumerating every way of
    assigning the pooled ranks to ``a`` when the pooled size is at most 16;
    larger samples use the normal approximation with tie-corrected variance
    and a 0.5 continuity correction. ``"exact"`` and ``"asymptotic"`` force
    one path.
    """
    if alternative not in ("greater", "two_sided"):
        raise ArgumentError(f"unsupported alternative {alternative!r}")
    if method not in ("auto", "exact", "asymptotic"):
        raise ArgumentError(f"unsupported method {method!r}")
    a = _sample(a, "a")
    b = _sample(b, "b")
    n1, n2 = a.size, b.size
    ranks = midranks(np.concatenate((a, b)))
    offset = n1 * (n1 + 1) / 2.0
    u = float(ranks[:n1].sum() - offset)
    n = n1 + n2
    if method == "exact" or (method == "auto" and n <= EXACT_MWU_MAX_N):
        null = kernels.subset_sums(ranks, n1) - offset
        # U takes values on a half-integer lattice; the guard absorbs nothing else
        upper = np.count_nonzero(null >= u - 1e-9) / null.size
        if alternative == "greater":
            p = upper
        else:
            lower = np.count_nonzero(null <= u + 1e-9) / null.size
            p = min(1.0, 2.0 * min(upper, lower))
        exact = True
    else:
        mu = n1 * n2 / 2.0
        _, counts = np.unique(ranks, return_counts=True)
        tie_term = float(np.sum(counts ** 3 - counts)) / (n * (n - 1))
        sigma = math.sqrt(n1 * n2 / 12.0 * ((n + 1) - tie_term))
        if sigma == 0.0:
            p = 1.0
        elif alternative == "greater":
            p = _norm_sf((u - mu - 0.5) / sigma)
        else:
            p = min(1.0, 2.0 * _norm_sf((abs(u - mu) - 0.5) / sigma))
        exact = False
    p = float(min(max(p, 0.0), 1.0))
    return TestResult(u, p, "mann_whitney_u", alternative, p < ALPHA, exact)


def _norm_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def kolmogorov_sf(x):
    """Survival function of the Kolmogorov distribution, P(K > x)."""
    if x <= 0.0:
        return 1.0
    if x < 1.0:
        # theta-function form converges fast for small arguments
        total, j = 0.0, 1
        while True:
            term = math.exp(-((2 * j - 1) ** 2) * math.pi ** 2 / (8.0 * x * x))
            total += term
            if term < _KS_TERM_TOL:
                break
            j += 1
        return min(1.0, max(0.0, 1.0 - math.sqrt(2.0 * math.pi) / x * total))
    total, j = 0.0, 1
    while True:
        term = math.exp(-2.0 * j * j * x * x)
        total += term if j % 2 else -term
        if term < _KS_TERM_TOL:
            break
        j += 1
    return min(1.0, max(0.0, 2.0 * total))


def ks_two_sample(a, b):
    """Two-sample Kolmogorov-Smirnov test with the asymptotic p-value."""
    a = np.sort(_sample(a, "a"))
    b = np.sort(_sample(b, "b"))
    d = float(kernels.ks_statistic(a, b))
    n_eff = a.size * b.size / (a.size + b.size)
    p = kolmogorov_sf(math.sqrt(n_eff) * d)
    return TestResult(d, p, "ks_two_sample", "two_sided", p < ALPHA)


@dataclass(frozen=True)
class Comparison:
    mwu: TestResult
    ks: TestResult

    def table_row(self):
        return {
            "mwu": f"{self.mwu.statistic:.1f} / {self.mwu.p_value:.2e}",
            "ks": f"{self.ks.statistic:.3f} / {self.ks.p_value:.2e}",
        }

    def to_dict(self):
        return {"mwu": self.mwu.to_dict(), "ks": self.ks.to_dict(), "table": self.table_row()}


def compare_methods(runs_a, runs_b, min_runs=5):
    """Test whether method A's AUC values exceed method B's."""
    if len(runs_a) < min_runs or len(runs_b) < min_runs:
        raise ArgumentError(f"need at least {min_runs} runs per method")
    return Comparison(
        mann_whitney_u(runs_a, runs_b, alternative="greater"),
        ks_two_sample(runs_a, runs_b),
    )
