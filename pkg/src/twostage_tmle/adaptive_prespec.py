"""Data-adaptive, fully pre-specified selection of Stage-2 adjustment.

The candidate adjustment variables define a grid of working-GLM pairs: one
choice for the outcome regression and one for the propensity score, each
either unadjusted or a candidate (single covariates by default; multi-name
candidates are allowed for trials with many clusters). Every grid cell is
scored by leave-one-unit-out cross-validation of the squared influence
curve -- the unit is a cluster, or a pair when the matched design is
preserved, so no training split ever separates a pair. Held-out curves are
centered at the cell's full-sample point estimate, which is stable at these
sample sizes; the gridwide minimizer is the pre-specified estimator.

Ties break toward no adjustment, then toward fewer adjusted components,
then toward candidate-list order, so selection is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ._backend import LINK_LOGIT
from .numerics import expit, fit_matrix, logit
from .stage2 import (
    ENDPOINT_NUDGE,
    PS_TRUNC,
    ClusterSummary,
    EffectEstimate,
    Stage2Config,
    _pair_groups,
    _tables,
    tmle_effect,
)

SCALES = ("rd", "log_rr")

Cell = tuple[tuple[str, ...], tuple[str, ...]]


@dataclass(frozen=True)
class SelectionReport:
    candidates: tuple[tuple[str, ...], ...]
    chosen_or: tuple[str, ...]
    chosen_ps: tuple[str, ...]
    cv_variances: dict[Cell, float]
    scheme: str
    scale: str
    chosen_estimate: EffectEstimate


def _normalize_candidates(candidates) -> tuple[tuple[str, ...], ...]:
    out = []
    for c in candidates:
        entry = (c,) if isinstance(c, str) else tuple(c)
        if not entry:
            raise ValueError("empty candidate entry; the unadjusted cell is implicit")
        if entry in out:
            raise ValueError(f"duplicate candidate {entry!r}")
        out.append(entry)
    return tuple(out)


def _cell_cv_variances(yw, a, alpha, cov, units, cell: Cell, config, centers, alpha_mean):
    """Mean squared held-out IC for one (or, ps) grid cell, per scale.

    A lean inline version of the stage-2 nuisance fit (same clamps,
    truncation, and weighting; verified against a brute-force enumeration
    oracle in the tests) keeps the leave-one-out loop affordable.
    """
    or_terms, ps_terms = cell
    psi1_c, psi0_c = centers
    n = len(yw)
    # On the linear-predictor scale the [1e-8, 1-1e-8] prediction clamp is a
    # symmetric cap, and switching the arm column is a shift by the arm
    # coefficient, which keeps the fold loop free of matrix rebuilds.
    lin_cap = float(logit(1.0 - 1e-8))

    ones = np.ones(n)
    Xor = np.ascontiguousarray(
        np.column_stack([ones, a] + [cov[t] for t in or_terms])
    )
    Xps = None
    if ps_terms:
        Xps = np.ascontiguousarray(
            np.column_stack([ones] + [cov[t] for t in ps_terms])
        )

    sum_rd = 0.0
    sum_lr = 0.0
    mask = np.empty(n, dtype=bool)
    zeros = np.zeros(n)
    ones_w = np.ones(n)
    for u in units:
        mask[:] = True
        mask[u] = False
        a_tr = a[mask]
        if not (np.any(a_tr == 1.0) and np.any(a_tr == 0.0)):
            return {s: float("inf") for s in SCALES}
        ntr = len(a_tr)
        yw_tr = yw[mask]
        al_tr = alpha[mask]
        Xtr = Xor[mask]
        try:
            beta, _, _, _, _ = fit_matrix(Xtr, yw_tr, al_tr, zeros[:ntr], LINK_LOGIT)
            lin_tr = (Xtr @ beta).clip(-lin_cap, lin_cap)
            if Xps is None:
                g1_tr = np.full(ntr, config.known_ps)
            else:
                bps, _, _, _, _ = fit_matrix(
                    Xps[mask], a_tr, ones_w[:ntr], zeros[:ntr], LINK_LOGIT
                )
                g1_tr = expit(Xps[mask] @ bps).clip(PS_TRUNC[0], PS_TRUNC[1])
            H = np.ascontiguousarray(
                np.column_stack([a_tr / g1_tr, (1.0 - a_tr) / (1.0 - g1_tr)])
            )
            eps, _, _, _, _ = fit_matrix(H, yw_tr, al_tr, lin_tr, LINK_LOGIT)
        except Exception:
            return {s: float("inf") for s in SCALES}

        lin_obs = Xor[u] @ beta
        lin1 = (lin_obs + beta[1] * (1.0 - a[u])).clip(-lin_cap, lin_cap)
        lin0 = (lin_obs - beta[1] * a[u]).clip(-lin_cap, lin_cap)
        if Xps is None:
            g1_te = np.full(len(u), config.known_ps)
        else:
            g1_te = expit(Xps[u] @ bps).clip(PS_TRUNC[0], PS_TRUNC[1])
        q1s = expit(lin1 + eps[0] / g1_te)
        q0s = expit(lin0 + eps[1] / (1.0 - g1_te))
        wnorm = alpha[u] / alpha_mean
        ic1 = (a[u] / g1_te) * (yw[u] - q1s) + q1s - psi1_c
        ic0 = ((1.0 - a[u]) / (1.0 - g1_te)) * (yw[u] - q0s) + q0s - psi0_c
        d_rd = float(np.sum(wnorm * (ic1 - ic0))) / len(u)
        d_lr = float(np.sum(wnorm * (ic1 / psi1_c - ic0 / psi0_c))) / len(u)
        sum_rd += d_rd * d_rd
        sum_lr += d_lr * d_lr
    return {"rd": sum_rd / len(units), "log_rr": sum_lr / len(units)}


def select_adjustment_multi(
    summaries: Sequence[ClusterSummary],
    candidates,
    config: Stage2Config,
    scales: Sequence[str] = SCALES,
) -> dict[str, SelectionReport]:
    """Grid search shared across scales (the leave-one-out nuisance fits do
    not depend on the scale, only the squared-IC loss does)."""
    summaries = list(summaries)
    for s in scales:
        if s not in SCALES:
            raise ValueError(f"unknown scale {s!r}")
    if len(summaries) < 4:
        raise ValueError("adaptive pre-specification needs at least 4 clusters")
    cands = _normalize_candidates(candidates)
    y, a, alpha, cov = _tables(summaries)
    yw = np.clip(y, ENDPOINT_NUDGE[0], ENDPOINT_NUDGE[1])
    for entry in cands:
        for name in entry:
            if name not in cov:
                raise ValueError(f"candidate covariate not found: {name!r}")

    if config.matched:
        units = _pair_groups(summaries)
        if len(units) < 2:
            raise ValueError("matched selection needs at least 2 pairs")
        scheme = "loo_pair"
    else:
        units = [np.array([i]) for i in range(len(summaries))]
        scheme = "loo_cluster"

    options = ((),) + cands
    # Enumeration order doubles as the tie order: unadjusted first, then
    # fewer adjusted components, then candidate-list order.
    cells = sorted(
        ((o, p) for o in options for p in options),
        key=lambda c: (
            int(bool(c[0])) + int(bool(c[1])),
            options.index(c[0]),
            options.index(c[1]),
        ),
    )

    alpha_mean = float(np.mean(alpha))
    tables: dict[str, dict[Cell, float]] = {s: {} for s in SCALES}
    estimates: dict[Cell, EffectEstimate | None] = {}
    for cell in cells:
        cfg = replace(config, or_terms=cell[0], ps_terms=cell[1])
        try:
            est = tmle_effect(summaries, cfg)
        except Exception:
            estimates[cell] = None
            for s in SCALES:
                tables[s][cell] = float("inf")
            continue
        estimates[cell] = est
        cvs = _cell_cv_variances(
            yw, a, alpha, cov, units, cell, config, (est.psi1, est.psi0), alpha_mean
        )
        for s in SCALES:
            tables[s][cell] = cvs[s]

    reports = {}
    for scale in scales:
        best_cell = None
        best = float("inf")
        for cell in cells:  # iteration order implements the tie-breaking
            if tables[scale][cell] < best:
                best = tables[scale][cell]
                best_cell = cell
        if best_cell is None or estimates[best_cell] is None:
            raise RuntimeError("every grid cell failed cross-validation")
        reports[scale] = SelectionReport(
            candidates=cands,
            chosen_or=best_cell[0],
            chosen_ps=best_cell[1],
            cv_variances=dict(tables[scale]),
            scheme=scheme,
            scale=scale,
            chosen_estimate=estimates[best_cell],
        )
    return reports


def select_adjustment(
    summaries: Sequence[ClusterSummary],
    candidates,
    config: Stage2Config,
    scale: str = "rd",
) -> SelectionReport:
    """Select the (outcome-regression, propensity-score) adjustment pair
    minimizing the cross-validated influence-curve variance on one scale."""
    return select_adjustment_multi(summaries, candidates, config, (scale,))[scale]
