import math

import numpy as np
import pytest
import scipy.special
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from fedsim import metrics
from fedsim.errors import ArgumentError, UndefinedMetricError
from oracles import brute_ks, concordance, enumerate_p, pair_count_u


def tie_free_pair(rng, max_total=12):
    n = int(rng.integers(2, max_total + 1))
    n1 = int(rng.integers(1, n))
    x = rng.permutation(n) + rng.random()
    return x[:n1].astype(float), x[n1:].astype(float)


class TestAccuracy:
    def test_examples(self):
        assert metrics.accuracy([0.9, 0.1], [1, 0]) == 1.0
        assert metrics.accuracy([0.9, 0.1], [0, 1]) == 0.0

    def test_threshold_is_inclusive(self):
        labels = [1, 0, 0, 1, 1]
        assert metrics.accuracy([0.5] * 5, labels) == pytest.approx(0.6)

    def test_accepts_scored_predictions(self):
        p = metrics.ScoredPredictions([0.7, 0.3], [1, 1], threshold=0.2)
        assert metrics.accuracy(p) == 1.0

    @pytest.mark.parametrize("scores,labels", [([], []), ([0.1], [2]), ([0.1, 0.2], [1]), ([np.nan], [1])])
    def test_invalid(self, scores, labels):
        with pytest.raises(ArgumentError):
            metrics.accuracy(scores, labels)


class TestAuc:
    def test_examples(self):
        assert metrics.auc_roc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
        assert metrics.auc_roc([0.9, 0.8, 0.3, 0.2], [0, 0, 1, 1]) == 0.0
        assert metrics.auc_roc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75

    def test_all_tied_is_half(self):
        assert metrics.auc_roc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            metrics.auc_roc([0.1, 0.2], [1, 1])

    def test_matches_concordance(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))
            assert metrics.auc_roc(scores, labels) == pytest.approx(concordance(scores, labels), abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 1)), min_size=2, max_size=60))
    def test_monotone_invariance(self, rows):
        scores = np.array([r[0] for r in rows], dtype=float)
        labels = np.array([r[1] for r in rows])
        if labels.min() == labels.max():
            return
        base = metrics.auc_roc(scores, labels)
        assert metrics.auc_roc(np.exp(scores / 10), labels) == base
        assert metrics.auc_roc(3 * scores - 7, labels) == base
        assert metrics.auc_roc(-scores, labels) == pytest.approx(1 - base, abs=1e-12)

    def test_roc_curve_endpoints(self):
        fpr, tpr = metrics.roc_curve([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0])
        assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0, 0, 1, 1)
        assert np.trapezoid(tpr, fpr) == 0.75


class TestMannWhitney:
    def test_example_pairs(self):
        a, b = [3, 4, 5], [1, 2, 6]
        res = metrics.mann_whitney_u(a, b)
        assert res.statistic == 6.0 and res.exact
        assert res.p_value == enumerate_p(a, b, "two_sided")
        assert metrics.mann_whitney_u(a, b, "greater").p_value == pytest.approx(0.35)

    def test_complete_tie(self):
        res = metrics.mann_whitney_u([1], [1])
        assert (res.statistic, res.p_value) == (0.5, 1.0)

    def test_dominating(self):
        res = metrics.mann_whitney_u(np.arange(10) + 10, np.arange(10), "greater")
        assert res.statistic == 100.0
        assert res.reject_at_alpha and not res.exact
        assert metrics.mann_whitney_u(np.arange(10) + 10, np.arange(10), "greater",
                                      method="exact").p_value == pytest.approx(1 / math.comb(20, 10))

    def test_exact_cutoff(self):
        assert metrics.mann_whitney_u(np.arange(8), np.arange(8) + 0.5).exact
        assert not metrics.mann_whitney_u(np.arange(9), np.arange(8) + 0.5).exact

    def test_matches_enumeration(self, rng):
        for _ in range(200):
            a, b = tie_free_pair(rng)
            for alt in ("greater", "two_sided"):
                res = metrics.mann_whitney_u(a, b, alt)
                assert res.statistic == pair_count_u(a, b)
                assert res.p_value == pytest.approx(enumerate_p(a, b, alt), abs=1e-12)

    def test_matches_scipy_exact(self, rng):
        for _ in range(50):
            a, b = tie_free_pair(rng, 16)
            ours = metrics.mann_whitney_u(a, b, "greater", method="exact")
            ref = scipy.stats.mannwhitneyu(a, b, alternative="greater", method="exact")
            assert ours.statistic == ref.statistic
            assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-12)

    def test_asymptotic_matches_scipy_with_ties(self, rng):
        for _ in range(50):
            a = rng.integers(0, 6, 25).astype(float)
            b = rng.integers(0, 6, 30).astype(float)
            for alt, sp_alt in (("greater", "greater"), ("two_sided", "two-sided")):
                ours = metrics.mann_whitney_u(a, b, alt)
                ref = scipy.stats.mannwhitneyu(a, b, alternative=sp_alt, method="asymptotic")
                assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-12)

    def test_exact_with_ties_matches_enumeration(self, rng):
        for _ in range(50):
            a = rng.integers(0, 4, int(rng.integers(1, 6))).astype(float)
            b = rng.integers(0, 4, int(rng.integers(1, 6))).astype(float)
            res = metrics.mann_whitney_u(a, b, "two_sided")
            assert res.p_value == pytest.approx(enumerate_p(a, b, "two_sided"), abs=1e-12)

    # known to fail for small unbalanced splits, e.g. |a|=1, |b|=3 differs by 0.129
    @given(st.data())
    def test_normal_approximation_close_to_exact(self, data):
        n = data.draw(st.integers(2, 12))
        n1 = data.draw(st.integers(1, n - 1))
        perm = data.draw(st.permutations(range(n)))
        alt = data.draw(st.sampled_from(["greater", "two_sided"]))
        a = np.array(perm[:n1], dtype=float)
        b = np.array(perm[n1:], dtype=float)
        exact = metrics.mann_whitney_u(a, b, alt, method="exact").p_value
        approx = metrics.mann_whitney_u(a, b, alt, method="asymptotic").p_value
        assert abs(exact - approx) <= 0.03

    @given(st.data())
    def test_complement(self, data):
        n = data.draw(st.integers(2, 40))
        n1 = data.draw(st.integers(1, n - 1))
        perm = data.draw(st.permutations(range(n)))
        a, b = perm[:n1], perm[n1:]
        u_a = metrics.mann_whitney_u(a, b).statistic
        u_b = metrics.mann_whitney_u(b, a).statistic
        assert u_a + u_b == len(a) * len(b)

    def test_errors(self):
        with pytest.raises(ArgumentError):
            metrics.mann_whitney_u([], [1])
        with pytest.raises(ArgumentError):
            metrics.mann_whitney_u([1], [2], alternative="less")
        with pytest.raises(ArgumentError):
            metrics.mann_whitney_u([1], [2], method="magic")


class TestKolmogorovSmirnov:
    def test_identical(self):
        res = metrics.ks_two_sample([1, 2, 3], [1, 2, 3])
        assert (res.statistic, res.p_value) == (0.0, 1.0)

    def test_disjoint(self):
        assert metrics.ks_two_sample([1, 2, 3], [4, 5, 6]).statistic == 1.0

    def test_brute_force_statistic(self, rng):
        for _ in range(1000):
            a = np.round(rng.standard_normal(50), 1)
            b = np.round(rng.standard_normal(50), 1)
            assert metrics.ks_two_sample(a, b).statistic == brute_ks(a.tolist(), b.tolist())

    def test_p_is_limiting_law_at_effective_n(self, rng):
        for _ in range(200):
            a, b = rng.standard_normal(int(rng.integers(5, 80))), rng.standard_normal(int(rng.integers(5, 80)))
            res = metrics.ks_two_sample(a, b)
            assert res.statistic == pytest.approx(scipy.stats.ks_2samp(a, b).statistic, abs=1e-15)
            n_eff = a.size * b.size / (a.size + b.size)
            ref = scipy.special.kolmogorov(math.sqrt(n_eff) * res.statistic)
            assert res.p_value == pytest.approx(ref, abs=1e-12)

    # D lives on a 1/50 lattice, so p takes ~16 values; this fails for exact p-values as well
    def test_null_p_values_uniform(self, rng):
        pvals = [metrics.ks_two_sample(rng.standard_normal(50), rng.standard_normal(50)).p_value
                 for _ in range(1000)]
        assert scipy.stats.kstest(pvals, "uniform").pvalue > 0.01

    def test_null_rejection_rate_at_most_alpha(self, rng):
        pvals = np.array([metrics.ks_two_sample(rng.standard_normal(50), rng.standard_normal(50)).p_value
                          for _ in range(1000)])
        assert np.mean(pvals < 0.05) <= 0.05 + 3 * math.sqrt(0.05 * 0.95 / 1000)

    @pytest.mark.parametrize("x", [0.0, 0.05, 0.3, 0.6, 0.99, 1.0, 1.01, 1.36, 2.0, 3.5, 6.0])
    def test_kolmogorov_sf(self, x):
        assert metrics.kolmogorov_sf(x) == pytest.approx(scipy.special.kolmogorov(x), abs=1e-12)

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=30),
           st.lists(st.integers(-5, 5), min_size=1, max_size=30))
    def test_bounds(self, a, b):
        d = metrics.ks_two_sample(a, b).statistic
        assert 0.0 <= d <= 1.0
        assert (d == 0.0) == (brute_ks(a, b) == 0.0)
        assert d == brute_ks(a, b)

    def test_empty(self):
        with pytest.raises(ArgumentError):
            metrics.ks_two_sample([1.0], [])


class TestCompare:
    def test_table_row_format(self):
        res = metrics.Comparison(
            metrics.TestResult(10234.0, 3.45e-15, "mann_whitney_u", "greater", True),
            metrics.TestResult(0.5, 1e-3, "ks_two_sample", "two_sided", True),
        )
        assert res.table_row() == {"mwu": "10234.0 / 3.45e-15", "ks": "0.500 / 1.00e-03"}

    def test_equal_runs(self):
        runs = [0.91, 0.93, 0.92, 0.95, 0.94]
        res = metrics.compare_methods(runs, runs)
        assert res.mwu.p_value >= 0.5 and res.mwu.alternative == "greater"
        assert res.ks.alternative == "two_sided"

    def test_disjoint_runs_reject(self, rng):
        a = 0.95 + 0.01 * rng.random(20)
        b = 0.80 + 0.01 * rng.random(20)
        res = metrics.compare_methods(a, b)
        assert res.mwu.reject_at_alpha and res.ks.reject_at_alpha

    def test_too_few_runs(self):
        with pytest.raises(ArgumentError):
            metrics.compare_methods([0.9] * 4, [0.8] * 5)

    def test_to_dict(self):
        d = metrics.compare_methods([1, 2, 3, 4, 5], [0, 1, 2, 3, 4]).to_dict()
        assert set(d) == {"mwu", "ks", "table"} and "p_value" in d["mwu"]
