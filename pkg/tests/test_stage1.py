"""Per-cluster endpoint estimation: collapse identities, worked oracle, ratios."""

import numpy as np
import pytest
from scipy.optimize import brentq

from twostage_tmle.numerics import expit, logit
from twostage_tmle.stage1 import (
    ClusterData,
    IndividualRecord,
    NoMeasuredOutcomesError,
    Stage1Config,
    estimate_endpoint,
    estimate_ratio_endpoint,
)

TMLE = Stage1Config(estimator="tmle", seed=11)
CC = Stage1Config(estimator="complete_case")


def make_cluster(rng, n=200, p_meas=0.5, p_y=0.4, n_cov=2):
    w = {f"W{j}": rng.normal(size=n) for j in range(1, n_cov + 1)}
    delta = (rng.uniform(size=n) < p_meas).astype(np.int8)
    y_full = (rng.uniform(size=n) < p_y).astype(float)
    y = np.where(delta == 1, y_full, np.nan)
    return ClusterData(w=w, m={}, delta=delta, y=y)


def test_complete_measurement_collapses_to_empirical_mean():
    rng = np.random.default_rng(0)
    cl = make_cluster(rng, n=150, p_meas=1.0)
    res_t = estimate_endpoint(cl, TMLE)
    res_c = estimate_endpoint(cl, CC)
    assert res_t.y_hat_c == pytest.approx(res_c.y_hat_c, abs=1e-8)
    assert res_t.n == res_t.n_measured == 150


def test_mcar_tmle_agrees_with_complete_case():
    """Under MCAR the two estimators target the same quantity; per-cluster
    discrepancies are adjustment noise and the average discrepancy is tiny."""
    rng = np.random.default_rng(2024)
    diffs = []
    for _ in range(200):
        cl = make_cluster(rng, n=200, p_meas=0.5, p_y=0.4)
        cfg = Stage1Config(estimator="tmle", seed=int(rng.integers(2**32)))
        diffs.append(estimate_endpoint(cl, cfg).y_hat_c - estimate_endpoint(cl, CC).y_hat_c)
    diffs = np.array(diffs)
    assert np.max(np.abs(diffs)) < 0.05
    assert abs(np.mean(diffs)) < 0.005


def test_worked_micro_cluster_matches_root_find_oracle():
    """Six individuals with pinned nuisances: the fluctuation intercept must
    solve the weighted score equation found independently by bracketing."""
    delta = np.array([1, 1, 1, 1, 0, 0], dtype=np.int8)
    y = np.array([1.0, 0.0, 1.0, 1.0, np.nan, np.nan])
    q = np.array([0.8, 0.3, 0.6, 0.7, 0.5, 0.4])
    g = np.array([0.8, 0.5, 0.6, 0.9, 0.7, 0.6])
    cl = ClusterData(w={"W": np.zeros(6)}, m={}, delta=delta, y=y)

    meas = delta == 1
    H = 1.0 / g[meas]

    def score(eps):
        return float(np.sum(H * (y[meas] - expit(eps + logit(q[meas])))))

    eps_star = brentq(score, -30, 30, xtol=1e-13)
    expected = float(np.mean(expit(eps_star + logit(q))))

    res = estimate_endpoint(cl, TMLE, q_override=q, g_override=g)
    assert res.y_hat_c == pytest.approx(expected, abs=1e-8)
    assert res.diagnostics.epsilon == pytest.approx(eps_star, abs=1e-7)
    assert abs(res.diagnostics.score_residual) <= 1e-6


def test_identical_measured_outcomes_are_handled_by_clamping():
    delta = np.ones(30, dtype=np.int8)
    cl = ClusterData(w={"W": np.linspace(-1, 1, 30)}, m={}, delta=delta, y=np.ones(30))
    res = estimate_endpoint(cl, TMLE)
    assert res.y_hat_c == pytest.approx(1.0, abs=1e-5)


def test_plugin_boundedness_under_heavy_missingness():
    rng = np.random.default_rng(77)
    for _ in range(25):
        n = int(rng.integers(10, 80))
        w = {"W": rng.normal(size=n) * 3}
        delta = (rng.uniform(size=n) < 0.25).astype(np.int8)
        if delta.sum() == 0:
            delta[0] = 1
        y = np.where(delta == 1, (rng.uniform(size=n) < 0.9).astype(float), np.nan)
        cfg = Stage1Config(estimator="tmle", g_bounds=(0.01, 1.0), seed=int(rng.integers(2**32)))
        res = estimate_endpoint(ClusterData(w=w, m={}, delta=delta, y=y), cfg)
        assert 0.0 <= res.y_hat_c <= 1.0


def test_outcome_rescaling_round_trip():
    rng = np.random.default_rng(5)
    n = 120
    delta = np.ones(n, dtype=np.int8)
    y = rng.uniform(10.0, 30.0, size=n)
    cl = ClusterData(w={"W": rng.normal(size=n)}, m={}, delta=delta, y=y)
    cfg = Stage1Config(estimator="tmle", outcome_range=(10.0, 30.0), seed=3)
    res = estimate_endpoint(cl, cfg)
    assert res.y_hat_c == pytest.approx(float(np.mean(y)), abs=1e-6)
    assert 10.0 <= res.y_hat_c <= 30.0


class TestRatioEndpoint:
    def _hand_cluster(self, n=10, n_pos=3, n_sup=2, rng=None):
        pos = np.zeros(n)
        pos[:n_pos] = 1.0
        sup = np.zeros(n)
        sup[:n_sup] = 1.0  # suppressed individuals are positive by construction
        w = {"W": np.zeros(n) if rng is None else rng.normal(size=n)}
        delta = np.ones(n, dtype=np.int8)
        return ClusterData(
            w=w, m={}, delta=delta, y=pos.copy(),
            outcomes={"pos": pos, "sup_pos": sup},
        )

    def test_identity_ratio_is_one(self):
        cl = self._hand_cluster()
        res = estimate_ratio_endpoint(cl, CC, CC, "pos", "pos")
        assert res.y_hat_c == pytest.approx(1.0, abs=1e-12)

    def test_hand_table_two_thirds(self):
        cl = self._hand_cluster()
        res = estimate_ratio_endpoint(cl, TMLE, TMLE, "sup_pos", "pos")
        assert res.y_hat_c == pytest.approx(2.0 / 3.0, abs=1e-6)
        assert res.components[0].y_hat_c == pytest.approx(0.2, abs=1e-6)
        assert res.components[1].y_hat_c == pytest.approx(0.3, abs=1e-6)

    def test_mcar_ratio_near_truth(self):
        rng = np.random.default_rng(31)
        n = 400
        pos = (rng.uniform(size=n) < 0.3).astype(float)
        sup = pos * (rng.uniform(size=n) < 2.0 / 3.0)
        delta = (rng.uniform(size=n) < 0.5).astype(np.int8)
        cl = ClusterData(
            w={"W": rng.normal(size=n)},
            m={},
            delta=delta,
            y=np.where(delta == 1, pos, np.nan),
            outcomes={
                "pos": np.where(delta == 1, pos, np.nan),
                "sup_pos": np.where(delta == 1, sup, np.nan),
            },
        )
        res = estimate_ratio_endpoint(cl, TMLE, TMLE, "sup_pos", "pos")
        assert res.y_hat_c == pytest.approx(2.0 / 3.0, abs=0.1)

    def test_degenerate_denominator(self):
        cl = self._hand_cluster(n_pos=0, n_sup=0)
        with pytest.raises(ValueError, match="degenerate denominator"):
            estimate_ratio_endpoint(cl, CC, CC, "sup_pos", "pos")


class TestErrorsAndContainers:
    def test_no_measured_outcomes(self):
        cl = ClusterData(
            w={"W": np.zeros(5)}, m={}, delta=np.zeros(5, dtype=np.int8),
            y=np.full(5, np.nan),
        )
        with pytest.raises(NoMeasuredOutcomesError, match="no measured outcomes"):
            estimate_endpoint(cl, TMLE)

    def test_record_invariant(self):
        with pytest.raises(ValueError, match="delta=1"):
            IndividualRecord(w={}, m={}, delta=1, y=None)
        with pytest.raises(ValueError, match="delta=1"):
            IndividualRecord(w={}, m={}, delta=0, y=0.5)

    def test_missing_adjustment_column(self):
        cl = ClusterData(
            w={"W": np.zeros(4)}, m={}, delta=np.ones(4, dtype=np.int8), y=np.zeros(4)
        )
        cfg = Stage1Config(estimator="tmle", adjustment=("ghost",))
        with pytest.raises(ValueError, match="ghost"):
            estimate_endpoint(cl, cfg)

    def test_records_round_trip(self):
        recs = [
            IndividualRecord(w={"W": 0.3}, m={"M": 1.0}, delta=1, y=1.0, outcomes={"pos": 1.0}),
            IndividualRecord(w={"W": -0.2}, m={"M": 0.0}, delta=0, y=None),
        ]
        cl = ClusterData.from_records(recs, id="c1", a_c=1)
        back = cl.records()
        assert back[0] == recs[0]
        assert back[1].delta == 0 and back[1].y is None
        res_records = estimate_endpoint(recs, CC)
        res_columnar = estimate_endpoint(cl, CC)
        assert res_records.y_hat_c == res_columnar.y_hat_c == 1.0

    def test_cluster_results_do_not_depend_on_other_clusters(self):
        rng = np.random.default_rng(8)
        a = make_cluster(rng, n=60)
        b = make_cluster(rng, n=60)
        cfg = Stage1Config(estimator="tmle", seed=4)
        first = [estimate_endpoint(c, cfg).y_hat_c for c in (a, b)]
        second = [estimate_endpoint(c, cfg).y_hat_c for c in (b, a)]
        assert first == [second[1], second[0]]
