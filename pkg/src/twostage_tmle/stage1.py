"""Per-cluster estimation of the missingness-adjusted endpoint.

Each cluster is analyzed on its own: the measurement mechanism may differ
arbitrarily between clusters and no cross-cluster state exists. Two
estimators are provided. ``complete_case`` is the empirical mean among the
measured (valid under MCAR within the cluster). ``tmle`` targets the
adjusted mean E[E(Y | measured, adjustment)]:

1. regress the outcome on the adjustment covariates among measured
   individuals (cross-validated learner selection),
2. predict for every individual, measured or not,
3. model measurement on the same covariates over all individuals, truncate
   the estimated probabilities to the configured bounds, and form the
   inverse-probability weight H = measured / g_hat,
4. fit an intercept-only logistic fluctuation of the outcome with the
   logit of the initial predictions as offset and H as weight,
5. average the updated predictions over the whole cluster.

Continuous outcomes are mapped to [0, 1] via the configured outcome range
before the logit-scale update and mapped back afterwards. Ratio-type
endpoints (for cross-sectional designs with missingness on both the
conditioning trait and the outcome) are estimated as a ratio of two such
endpoint estimates sharing the measurement indicator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._backend import LINK_LOGIT
from .numerics import expit, fit_matrix, logit
from .seeds import split_seed
from .superlearner import DEFAULT_LIBRARY, PROB_CLAMP, LearnerSpec, sl_fit, sl_predict


class NoMeasuredOutcomesError(ValueError):
    """A cluster contributed no measured outcomes; analysis cannot proceed."""


@dataclass(frozen=True)
class IndividualRecord:
    """One participant: baseline covariates, post-baseline covariates, the
    measurement indicator, and the outcome (present iff measured)."""

    w: Mapping[str, float]
    m: Mapping[str, float]
    delta: int
    y: float | None = None
    outcomes: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.delta not in (0, 1):
            raise ValueError("delta must be 0 or 1")
        if (self.y is None) == bool(self.delta):
            raise ValueError("outcome must be present exactly when delta=1")


@dataclass
class ClusterData:
    """Columnar container for one cluster.

    Outcome arrays carry NaN where the measurement indicator is 0. Extra
    named outcome columns (ratio endpoints) live in ``outcomes``.
    """

    w: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    delta: np.ndarray
    y: np.ndarray
    id: str = ""
    pair_id: str | None = None
    a_c: int = 0
    e_c: dict[str, float] = field(default_factory=dict)
    outcomes: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(len(self.delta))

    @classmethod
    def from_records(cls, records: Sequence[IndividualRecord], **meta) -> "ClusterData":
        records = list(records)
        if not records:
            raise ValueError("cluster has no individuals")
        w_names = tuple(records[0].w)
        m_names = tuple(records[0].m)
        extra = tuple(records[0].outcomes)
        w = {k: np.array([float(r.w[k]) for r in records]) for k in w_names}
        m = {k: np.array([float(r.m[k]) for r in records]) for k in m_names}
        delta = np.array([r.delta for r in records], dtype=np.int8)
        y = np.array([np.nan if r.y is None else float(r.y) for r in records])
        outcomes = {
            k: np.array(
                [float(r.outcomes[k]) if r.delta else np.nan for r in records]
            )
            for k in extra
        }
        return cls(w=w, m=m, delta=delta, y=y, outcomes=outcomes, **meta)

    def records(self) -> list[IndividualRecord]:
        out = []
        for j in range(self.n):
            measured = bool(self.delta[j])
            out.append(
                IndividualRecord(
                    w={k: float(v[j]) for k, v in self.w.items()},
                    m={k: float(v[j]) for k, v in self.m.items()},
                    delta=int(self.delta[j]),
                    y=float(self.y[j]) if measured else None,
                    outcomes={k: float(v[j]) for k, v in self.outcomes.items()}
                    if measured
                    else {},
                )
            )
        return out


@dataclass(frozen=True)
class Stage1Config:
    estimator: str = "tmle"
    adjustment: tuple[str, ...] | None = None  # None = every W and M column
    g_bounds: tuple[float, float] = (0.025, 1.0)
    sl_library: tuple[LearnerSpec, ...] = DEFAULT_LIBRARY
    sl_folds: int = 10
    seed: int = 0
    outcome_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.estimator not in ("complete_case", "tmle"):
            raise ValueError(f"unknown stage-1 estimator {self.estimator!r}")
        lo, hi = self.g_bounds
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("g_bounds must satisfy 0 < lower <= upper <= 1")
        a, b = self.outcome_range
        if not b > a:
            raise ValueError("outcome_range must be increasing")
        if self.adjustment is not None:
            object.__setattr__(self, "adjustment", tuple(self.adjustment))
        object.__setattr__(self, "sl_library", tuple(self.sl_library))


@dataclass(frozen=True)
class Stage1Diagnostics:
    outcome_learner: str | None
    measurement_learner: str | None
    g_min: float
    g_max: float
    g_truncated: int
    epsilon: float
    score_residual: float


@dataclass(frozen=True)
class Stage1Result:
    y_hat_c: float
    n: int
    n_measured: int
    diagnostics: Stage1Diagnostics | None = None
    components: tuple["Stage1Result", "Stage1Result"] | None = None


def _as_cluster(cluster) -> ClusterData:
    if isinstance(cluster, ClusterData):
        return cluster
    return ClusterData.from_records(cluster)


def _adjustment_table(cluster: ClusterData, config: Stage1Config) -> dict:
    pool = {**cluster.w, **cluster.m}
    if config.adjustment is None:
        return dict(pool)
    table = {}
    for name in config.adjustment:
        if name not in pool:
            raise ValueError(f"adjustment covariate not found in cluster data: {name!r}")
        table[name] = pool[name]
    return table


def estimate_endpoint(
    cluster,
    config: Stage1Config,
    *,
    outcome: str = "y",
    q_override: np.ndarray | None = None,
    g_override: np.ndarray | None = None,
) -> Stage1Result:
    """Estimate one cluster's endpoint.

    ``outcome`` names the outcome column ("y" is the primary one).
    ``q_override`` / ``g_override`` replace the fitted outcome regression and
    measurement mechanism with externally supplied per-individual values
    (testing hook; overrides are clamped/truncated exactly like fits).
    """
    cluster = _as_cluster(cluster)
    return _estimate(
        cluster, config, _resolve_outcome(cluster, outcome), q_override, g_override
    )


def _estimate(cluster, config, y_raw, q_override=None, g_override=None) -> Stage1Result:
    n = cluster.n
    meas = np.asarray(cluster.delta, dtype=bool)
    n_meas = int(meas.sum())
    if n == 0:
        raise ValueError("cluster has no individuals")
    if n_meas == 0:
        raise NoMeasuredOutcomesError("no measured outcomes in cluster")
    if np.any(np.isnan(np.asarray(y_raw, dtype=float)[meas])):
        raise ValueError("measured individuals must carry an outcome value")

    if config.estimator == "complete_case":
        return Stage1Result(
            y_hat_c=float(np.mean(np.asarray(y_raw, dtype=float)[meas])),
            n=n,
            n_measured=n_meas,
        )

    lo, hi = config.outcome_range
    y01 = (np.asarray(y_raw, dtype=float) - lo) / (hi - lo)
    if np.nanmin(y01[meas]) < -1e-12 or np.nanmax(y01[meas]) > 1 + 1e-12:
        raise ValueError("outcomes fall outside the configured outcome_range")
    y01 = np.clip(y01, 0.0, 1.0)
    y_meas = y01[meas]

    table = _adjustment_table(cluster, config)
    table_meas = {k: v[meas] for k, v in table.items()}

    outcome_label = None
    if q_override is not None:
        qhat = np.clip(np.asarray(q_override, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
        outcome_label = "(override)"
    else:
        v_out = min(config.sl_folds, n_meas)
        if v_out < 2:
            qhat = np.full(n, float(np.clip(np.mean(y_meas), PROB_CLAMP, 1 - PROB_CLAMP)))
            outcome_label = "mean"
        else:
            fit_q = sl_fit(
                table_meas,
                y_meas,
                config.sl_library,
                v=v_out,
                seed=split_seed(config.seed, 1),
            )
            qhat = sl_predict(fit_q, table, n_rows=n)
            outcome_label = fit_q.selected_label

    g_lo, g_hi = config.g_bounds
    measurement_label = None
    if g_override is not None:
        g_raw = np.asarray(g_override, dtype=float)
        measurement_label = "(override)"
    else:
        v_g = min(config.sl_folds, n)
        if v_g < 2:
            g_raw = np.full(n, float(np.mean(meas)))
            measurement_label = "mean"
        else:
            fit_g = sl_fit(
                table,
                meas.astype(float),
                config.sl_library,
                v=v_g,
                seed=split_seed(config.seed, 2),
            )
            g_raw = sl_predict(fit_g, table, n_rows=n)
            measurement_label = fit_g.selected_label
    ghat = np.clip(g_raw, g_lo, g_hi)
    g_truncated = int(np.sum(g_raw < g_lo) + np.sum(g_raw > g_hi))

    H = np.where(meas, 1.0 / ghat, 0.0)
    offset = logit(qhat[meas])
    ones = np.ascontiguousarray(np.ones((n_meas, 1)))
    beta, _, _, _, _ = fit_matrix(
        ones, np.ascontiguousarray(y_meas), H[meas], offset, LINK_LOGIT
    )
    eps = float(beta[0])
    qstar = expit(eps + logit(qhat))
    score = float(np.sum(H[meas] * (y_meas - qstar[meas])))

    y01_hat = float(np.mean(qstar))
    return Stage1Result(
        y_hat_c=lo + (hi - lo) * y01_hat,
        n=n,
        n_measured=n_meas,
        diagnostics=Stage1Diagnostics(
            outcome_learner=outcome_label,
            measurement_learner=measurement_label,
            g_min=float(np.min(ghat)),
            g_max=float(np.max(ghat)),
            g_truncated=g_truncated,
            epsilon=eps,
            score_residual=score,
        ),
    )


def _resolve_outcome(cluster: ClusterData, name: str) -> np.ndarray:
    if name == "y":
        return cluster.y
    if name not in cluster.outcomes:
        raise ValueError(f"outcome column not found in cluster data: {name!r}")
    return cluster.outcomes[name]


def estimate_ratio_endpoint(
    cluster,
    config_num: Stage1Config,
    config_den: Stage1Config,
    num_outcome: str,
    den_outcome: str,
) -> Stage1Result:
    """Ratio-type endpoint: each component is estimated separately (sharing
    the measurement indicator) and the endpoint is their ratio."""
    cluster = _as_cluster(cluster)
    num = _estimate(cluster, config_num, _resolve_outcome(cluster, num_outcome))
    den = _estimate(cluster, config_den, _resolve_outcome(cluster, den_outcome))
    if den.y_hat_c <= 1e-10:
        raise ValueError("degenerate denominator in ratio endpoint")
    return Stage1Result(
        y_hat_c=num.y_hat_c / den.y_hat_c,
        n=cluster.n,
        n_measured=num.n_measured,
        diagnostics=num.diagnostics,
        components=(num, den),
    )
