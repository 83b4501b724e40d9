"""Baseline estimators: hand-arithmetic oracles and structural checks."""

import numpy as np
import pytest

from twostage_tmle.numerics import expit
from twostage_tmle.comparators import care_effect, gee_log_rr, t_test_effect
from twostage_tmle.stage1 import ClusterData
from twostage_tmle.stage2 import ClusterSummary


def summaries(y, a, pair_ids=None):
    return [
        ClusterSummary(
            id=f"c{i}",
            a_c=int(a[i]),
            y_hat_c=float(y[i]),
            pair_id=None if pair_ids is None else pair_ids[i],
        )
        for i in range(len(y))
    ]


def cluster(y_full, delta, a_c, w=None, e_c=None, cid="c", pair_id=None):
    n = len(y_full)
    delta = np.asarray(delta, dtype=np.int8)
    return ClusterData(
        w=w or {"W1": np.zeros(n)},
        m={},
        delta=delta,
        y=np.where(delta == 1, np.asarray(y_full, dtype=float), np.nan),
        id=cid,
        pair_id=pair_id,
        a_c=a_c,
        e_c=e_c or {},
    )


class TestTTest:
    def test_null_degenerate(self):
        est = t_test_effect(summaries([0.5, 0.5, 0.5, 0.5], [1, 1, 0, 0]))
        assert est.point == 0.0
        assert est.se == 0.0
        assert est.pvalue == 1.0

    def test_hand_arithmetic(self):
        est = t_test_effect(summaries([0.6, 0.4, 0.3, 0.5], [1, 1, 0, 0]))
        assert est.point == pytest.approx(0.1)
        assert est.se == pytest.approx(np.sqrt(0.02), rel=1e-12)
        assert est.point / est.se == pytest.approx(0.707, abs=5e-4)
        assert est.df == 2
        lo, hi = est.ci
        assert lo < 0.1 < hi

    def test_paired(self):
        y = [0.6, 0.3, 0.4, 0.5]
        a = [1, 0, 1, 0]
        est = t_test_effect(summaries(y, a, ["p0", "p0", "p1", "p1"]), matched=True)
        d = np.array([0.3, -0.1])
        assert est.point == pytest.approx(d.mean())
        assert est.se == pytest.approx(np.std(d, ddof=1) / np.sqrt(2))
        assert est.df == 1


class TestCare:
    def test_exact_predictions_give_zero_residuals(self):
        rng = np.random.default_rng(0)
        clusters = []
        for i in range(6):
            w = rng.normal(size=50)
            y = expit(-0.3 + 0.8 * w)  # quasi-binomial outcomes, exactly logistic in W1
            clusters.append(
                cluster(y, np.ones(50), a_c=i % 2, w={"W1": w}, cid=f"c{i}")
            )
        est = care_effect(clusters, covariates=("W1",))
        assert est.point == pytest.approx(0.0, abs=1e-7)

    def test_noise_covariates_track_t_test(self):
        diffs = []
        for rep in range(200):
            rng = np.random.default_rng(300 + rep)
            clusters = []
            vals = []
            for i in range(10):
                n = 80
                w = rng.normal(size=n)
                delta = (rng.uniform(size=n) < 0.7).astype(np.int8)
                y = (rng.uniform(size=n) < 0.4 + 0.05 * (i % 2)).astype(float)
                clusters.append(
                    cluster(y, delta, a_c=i % 2, w={"W1": w}, cid=f"c{i}")
                )
                vals.append(np.mean(y[delta == 1]))
            care = care_effect(clusters, covariates=("W1",))
            tt = t_test_effect(summaries(vals, [i % 2 for i in range(10)]))
            diffs.append(abs(care.point - tt.point))
        assert float(np.mean(diffs)) < 0.01

    def test_ci_consistent_with_reference(self):
        rng = np.random.default_rng(5)
        clusters = [
            cluster(
                (rng.uniform(size=60) < 0.5).astype(float),
                np.ones(60),
                a_c=i % 2,
                w={"W1": rng.normal(size=60)},
                cid=f"c{i}",
            )
            for i in range(8)
        ]
        est = care_effect(clusters, covariates=("W1",))
        from scipy.special import stdtrit

        tcrit = stdtrit(est.df, 0.975)
        assert est.ci == pytest.approx(
            (est.point - tcrit * est.se, est.point + tcrit * est.se), rel=1e-9
        )


class TestGee:
    def test_null_large_sample(self):
        rng = np.random.default_rng(1)
        clusters = [
            cluster(
                (rng.uniform(size=500) < 0.3).astype(float),
                np.ones(500),
                a_c=i % 2,
                w={"W1": rng.normal(size=500)},
                cid=f"c{i}",
            )
            for i in range(20)
        ]
        est = gee_log_rr(clusters)
        assert est.scale == "log_rr"
        assert est.point == pytest.approx(0.0, abs=0.05)
        assert est.df is None

    def test_saturated_doubling_risk(self):
        def block(k, n):
            y = np.zeros(n)
            y[:k] = 1.0
            return y

        clusters = [
            cluster(block(4, 10), np.ones(10), 1, w={"W1": np.full(10, 2.0)}, cid="a"),
            cluster(block(4, 10), np.ones(10), 1, w={"W1": np.full(10, 2.0)}, cid="b"),
            cluster(block(2, 10), np.ones(10), 0, w={"W1": np.full(10, 2.0)}, cid="c"),
            cluster(block(2, 10), np.ones(10), 0, w={"W1": np.full(10, 2.0)}, cid="d"),
        ]
        est = gee_log_rr(clusters)
        assert np.exp(est.point) == pytest.approx(2.0, abs=1e-6)

    def test_sandwich_invariant_to_row_order(self):
        rng = np.random.default_rng(9)
        def make(shuffled):
            clusters = []
            for i in range(6):
                rs = np.random.default_rng(100 + i)
                n = 40
                w = rs.normal(size=n)
                y = (rs.uniform(size=n) < expit(-0.5 + 0.5 * w + 0.2 * (i % 2))).astype(float)
                order = np.random.default_rng(i if shuffled else 0).permutation(n) if shuffled else np.arange(n)
                clusters.append(
                    cluster(y[order], np.ones(n), i % 2, w={"W1": w[order]}, cid=f"c{i}")
                )
            return clusters

        a = gee_log_rr(make(False))
        b = gee_log_rr(make(True))
        assert b.point == pytest.approx(a.point, rel=1e-9)
        assert b.se == pytest.approx(a.se, rel=1e-9)


def test_comparators_agree_under_no_covariate_effect():
    """Zero covariate effect, equal sizes: all three point estimates are
    the arm contrast on their scale (up to sampling noise)."""
    rng = np.random.default_rng(21)
    clusters, vals, arms = [], [], []
    for i in range(40):
        n = 400
        a = i % 2
        y = (rng.uniform(size=n) < (0.45 if a else 0.30)).astype(float)
        clusters.append(cluster(y, np.ones(n), a, w={"W1": rng.normal(size=n)}, cid=f"c{i}"))
        vals.append(y.mean())
        arms.append(a)
    tt = t_test_effect(summaries(vals, arms))
    care = care_effect(clusters, covariates=("W1",))
    gee = gee_log_rr(clusters, covariates=("W1",))
    assert care.point == pytest.approx(tt.point, abs=0.01)
    assert np.exp(gee.point) == pytest.approx(0.45 / 0.30, abs=0.05)
