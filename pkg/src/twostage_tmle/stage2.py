"""Cluster-level TMLE of the treatment effect with influence-curve inference.

Inputs are one summary row per cluster (arm, covariates, Stage-1 endpoint
estimate, weight). The estimator:

1. fits a logit-link quasi-binomial working regression of the endpoint on
   intercept + arm + selected covariates (cluster weights apply);
2. predicts each cluster's endpoint under both arms;
3. computes the treatment probability -- the known randomization
   probability when no propensity covariates are selected, otherwise a
   working logistic fit truncated to [0.05, 0.95] -- and the two clever
   covariates H1 = A/g1 and H0 = (1-A)/g0;
4. fits the two-dimensional fluctuation (no intercept, initial logit as
   offset, cluster weights) and updates each prediction on the logit scale
   by eps_a / g_a, targeting both arms at once so the additive and relative
   scales share one update;
5. averages the targeted predictions with the cluster weights to get the
   arm-specific means, the risk difference, and the log risk ratio.

Inference uses the estimated influence curve per independent unit (cluster,
or pair average when the pair-matched design is preserved): the variance is
the sample variance of the unit-level curve over the unit count, with
Student-t reference (N-2 df unmatched, N/2-1 matched). The relative scale
is handled by the delta method on the log scale, so the risk-ratio interval
is the exponentiated log-scale interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.special import stdtr, stdtrit

from ._backend import LINK_LOGIT
from .numerics import expit, fit_matrix, logit

PS_TRUNC = (0.05, 0.95)
ENDPOINT_NUDGE = (0.005, 0.995)
_PRED_CLAMP = 1e-8


@dataclass(frozen=True)
class ClusterSummary:
    """One cluster's Stage-2 analysis row."""

    id: str
    a_c: int
    y_hat_c: float
    covariates: Mapping[str, float] = field(default_factory=dict)
    pair_id: str | None = None
    alpha: float = 1.0
    size: int | None = None

    def __post_init__(self):
        if self.a_c not in (0, 1):
            raise ValueError("arm must be 0 or 1")
        if not self.alpha > 0:
            raise ValueError("cluster weight must be positive")


@dataclass(frozen=True)
class Stage2Config:
    or_terms: tuple[str, ...] = ()
    ps_terms: tuple[str, ...] = ()
    known_ps: float = 0.5
    matched: bool = False
    weights: str = "equal_cluster"

    def __post_init__(self):
        object.__setattr__(self, "or_terms", tuple(self.or_terms))
        object.__setattr__(self, "ps_terms", tuple(self.ps_terms))
        if not 0.0 < self.known_ps < 1.0:
            raise ValueError("known_ps must lie in (0, 1)")
        if self.weights not in ("equal_cluster", "equal_individual"):
            raise ValueError(f"unknown weight scheme {self.weights!r}")


@dataclass(frozen=True)
class EffectEstimate:
    psi1: float
    psi0: float
    rd: float
    log_rr: float
    ic_rd: np.ndarray
    ic_log_rr: np.ndarray
    se_rd: float
    se_log_rr: float
    df: int
    ci_rd: tuple[float, float]
    ci_rr: tuple[float, float]
    pvalue_rd: float
    pvalue_rr: float
    adjustment: dict
    rr_defined: bool = True
    # fluctuation score residuals (arm 1, arm 0); ~0 at a converged update
    score_residuals: tuple[float, float] = (float("nan"), float("nan"))

    @property
    def rr(self) -> float:
        return float(np.exp(self.log_rr))


def weights_for(summaries: Sequence[ClusterSummary], scheme: str) -> np.ndarray:
    """Cluster weights: all ones, or size-proportional with mean one
    (equal weight to every participant instead of every cluster)."""
    n = len(summaries)
    if scheme == "equal_cluster":
        return np.ones(n)
    if scheme == "equal_individual":
        sizes = []
        for s in summaries:
            if s.size is None:
                raise ValueError(f"cluster {s.id!r} has no size; equal_individual weights need sizes")
            sizes.append(float(s.size))
        sizes = np.asarray(sizes)
        return sizes * n / np.sum(sizes)
    raise ValueError(f"unknown weight scheme {scheme!r}")


def _tables(summaries: Sequence[ClusterSummary]):
    y = np.array([s.y_hat_c for s in summaries], dtype=float)
    a = np.array([s.a_c for s in summaries], dtype=float)
    alpha = np.array([s.alpha for s in summaries], dtype=float)
    names: list[str] = []
    for s in summaries:
        for k in s.covariates:
            if k not in names:
                names.append(k)
    cov = {}
    for k in names:
        try:
            cov[k] = np.array([float(s.covariates[k]) for s in summaries])
        except KeyError:
            raise ValueError(f"covariate {k!r} missing for some clusters") from None
    return y, a, alpha, cov


def _design(a, cov, terms, arm=None):
    n = len(a)
    acol = a if arm is None else np.full(n, float(arm))
    cols = [np.ones(n), acol]
    for t in terms:
        if t not in cov:
            raise ValueError(f"outcome-regression covariate not found: {t!r}")
        cols.append(cov[t])
    return np.ascontiguousarray(np.column_stack(cols))


@dataclass(frozen=True)
class _Nuisance:
    """Fitted Stage-2 nuisance parts, applicable to arbitrary cluster rows."""

    or_beta: np.ndarray
    or_terms: tuple[str, ...]
    ps_beta: np.ndarray | None
    ps_terms: tuple[str, ...]
    known_ps: float
    eps1: float
    eps0: float


def _fit_nuisance(yw, a, alpha, cov, config: Stage2Config) -> _Nuisance:
    if int(np.sum(a == 1)) == 0 or int(np.sum(a == 0)) == 0:
        raise ValueError("both arms must be present")
    Xor = _design(a, cov, config.or_terms)
    or_beta, _, _, _, _ = fit_matrix(
        Xor, yw, alpha, np.zeros(len(yw)), LINK_LOGIT
    )

    ps_beta = None
    if config.ps_terms:
        Xps = np.ascontiguousarray(
            np.column_stack([np.ones(len(a))] + [cov[t] for t in config.ps_terms])
        )
        ps_beta, _, _, _, _ = fit_matrix(
            Xps, a, np.ones(len(a)), np.zeros(len(a)), LINK_LOGIT
        )

    nuis = _Nuisance(
        or_beta=or_beta,
        or_terms=config.or_terms,
        ps_beta=ps_beta,
        ps_terms=config.ps_terms,
        known_ps=config.known_ps,
        eps1=0.0,
        eps0=0.0,
    )
    q1, q0, g1 = _initial_predictions(nuis, a, cov)
    qobs = np.where(a == 1, q1, q0)
    H1 = a / g1
    H0 = (1.0 - a) / (1.0 - g1)
    Xfl = np.ascontiguousarray(np.column_stack([H1, H0]))
    eps, _, _, _, _ = fit_matrix(Xfl, yw, alpha, logit(qobs), LINK_LOGIT)
    return _Nuisance(
        or_beta=or_beta,
        or_terms=config.or_terms,
        ps_beta=ps_beta,
        ps_terms=config.ps_terms,
        known_ps=config.known_ps,
        eps1=float(eps[0]),
        eps0=float(eps[1]),
    )


def _initial_predictions(nuis: _Nuisance, a, cov):
    q1 = expit(_design(a, cov, nuis.or_terms, arm=1) @ nuis.or_beta)
    q0 = expit(_design(a, cov, nuis.or_terms, arm=0) @ nuis.or_beta)
    q1 = np.clip(q1, _PRED_CLAMP, 1.0 - _PRED_CLAMP)
    q0 = np.clip(q0, _PRED_CLAMP, 1.0 - _PRED_CLAMP)
    if nuis.ps_beta is None:
        g1 = np.full(len(a), nuis.known_ps)
    else:
        Xps = np.column_stack([np.ones(len(a))] + [cov[t] for t in nuis.ps_terms])
        g1 = np.clip(expit(Xps @ nuis.ps_beta), PS_TRUNC[0], PS_TRUNC[1])
    return q1, q0, g1


def _targeted_predictions(nuis: _Nuisance, a, cov):
    """Targeted predictions under both arms plus the treatment probability."""
    q1, q0, g1 = _initial_predictions(nuis, a, cov)
    q1s = expit(logit(q1) + nuis.eps1 / g1)
    q0s = expit(logit(q0) + nuis.eps0 / (1.0 - g1))
    return q1s, q0s, g1


def _pair_groups(summaries: Sequence[ClusterSummary]) -> list[np.ndarray]:
    order: dict[str, list[int]] = {}
    for i, s in enumerate(summaries):
        if s.pair_id is None:
            raise ValueError(f"cluster {s.id!r} has no pair id; matched analysis needs complete pairs")
        order.setdefault(s.pair_id, []).append(i)
    groups = []
    for pid, idx in order.items():
        if len(idx) != 2:
            raise ValueError(f"pair {pid!r} does not have exactly two clusters")
        arms = {summaries[idx[0]].a_c, summaries[idx[1]].a_c}
        if arms != {0, 1}:
            raise ValueError(f"pair {pid!r} does not have one cluster per arm")
        groups.append(np.array(idx))
    return groups


@lru_cache(maxsize=None)
def _t_quantile(df: int) -> float:
    return float(stdtrit(df, 0.975))


def _t_interval(point, se, df):
    if se == 0.0:
        p = 1.0 if point == 0.0 else 0.0
        return (point, point), p
    tcrit = _t_quantile(df)
    p = float(2.0 * stdtr(df, -abs(point / se)))
    return (point - tcrit * se, point + tcrit * se), p


def tmle_effect(summaries: Sequence[ClusterSummary], config: Stage2Config) -> EffectEstimate:
    """Targeted estimate of the intervention effect across clusters."""
    summaries = list(summaries)
    y, a, alpha, cov = _tables(summaries)
    n = len(summaries)
    if np.sum(a == 1) < 2 or np.sum(a == 0) < 2:
        raise ValueError("need at least two clusters per arm")
    if np.min(y) < 0.0 or np.max(y) > 1.0:
        raise ValueError("stage-1 endpoints must lie in [0, 1]")
    groups = _pair_groups(summaries) if config.matched else None

    yw = np.clip(y, ENDPOINT_NUDGE[0], ENDPOINT_NUDGE[1])
    nuis = _fit_nuisance(yw, a, alpha, cov, config)
    q1s, q0s, g1 = _targeted_predictions(nuis, a, cov)
    score1 = float(np.sum(alpha * (a / g1) * (yw - q1s)))
    score0 = float(np.sum(alpha * ((1.0 - a) / (1.0 - g1)) * (yw - q0s)))

    wsum = float(np.sum(alpha))
    psi1 = float(np.sum(alpha * q1s) / wsum)
    psi0 = float(np.sum(alpha * q0s) / wsum)
    rd = psi1 - psi0
    rr_defined = psi0 > 1e-10 and psi1 > 0.0
    log_rr = float(np.log(psi1 / psi0)) if rr_defined else float("nan")

    wnorm = alpha / np.mean(alpha)
    ic1 = (a / g1) * (yw - q1s) + q1s - psi1
    ic0 = ((1.0 - a) / (1.0 - g1)) * (yw - q0s) + q0s - psi0
    ic_rd = wnorm * (ic1 - ic0)
    if rr_defined:
        ic_log_rr = wnorm * (ic1 / psi1 - ic0 / psi0)
    else:
        ic_log_rr = np.full(n, np.nan)

    if config.matched:
        ic_rd = np.array([ic_rd[g].mean() for g in groups])
        ic_log_rr = np.array([ic_log_rr[g].mean() for g in groups])
        units = len(groups)
        df = units - 1
    else:
        units = n
        df = n - 2

    se_rd = float(np.sqrt(np.var(ic_rd, ddof=1) / units))
    ci_rd, p_rd = _t_interval(rd, se_rd, df)
    if rr_defined:
        se_log = float(np.sqrt(np.var(ic_log_rr, ddof=1) / units))
        ci_log, p_rr = _t_interval(log_rr, se_log, df)
        ci_rr = (float(np.exp(ci_log[0])), float(np.exp(ci_log[1])))
    else:
        se_log = float("nan")
        ci_rr = (float("nan"), float("nan"))
        p_rr = float("nan")

    return EffectEstimate(
        psi1=psi1,
        psi0=psi0,
        rd=rd,
        log_rr=log_rr,
        ic_rd=ic_rd,
        ic_log_rr=ic_log_rr,
        se_rd=se_rd,
        se_log_rr=se_log,
        df=df,
        ci_rd=ci_rd,
        ci_rr=ci_rr,
        pvalue_rd=p_rd,
        pvalue_rr=p_rr,
        adjustment={
            "or_terms": list(config.or_terms),
            "ps_terms": list(config.ps_terms),
            "known_ps": config.known_ps,
            "matched": config.matched,
        },
        rr_defined=rr_defined,
        score_residuals=(score1, score0),
    )
