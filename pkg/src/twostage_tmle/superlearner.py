"""Cross-validated discrete learner selection for the Stage-1 regressions.

A small library of candidate learners is scored by V-fold cross-validated
negative Bernoulli log-likelihood and the lowest-risk learner is refit on
the full data (a discrete cross-validation selector). Three learner kinds
cover the Stage-1 needs: the empirical mean, a main-terms logistic
regression, and main terms plus squared terms of the continuous covariates
(the spline-free stand-in for a smooth additive fit).

Fold assignment is a deterministic function of (seed, n, v), stratified on
the outcome when it is binary with both classes present. All emitted
probabilities are clamped to [1e-6, 1 - 1e-6] so downstream logit-scale
offsets stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._backend import LINK_LOGIT
from .numerics import DesignSpec, GlmFit, fit_matrix, predict

PROB_CLAMP = 1e-6

_KINDS = ("empirical_mean", "glm_main_terms", "glm_main_plus_squares")
_JSON_NAMES = {"mean": "empirical_mean", "glm": "glm_main_terms", "glm_sq": "glm_main_plus_squares"}

# Stream tag mixed into the Philox key for fold shuffling.
_FOLD_STREAM = 0xF01D


def _stable_expit(lin):
    out = np.empty_like(lin)
    pos = lin >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-lin[pos]))
    e = np.exp(lin[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    label: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")


DEFAULT_LIBRARY = (
    LearnerSpec("empirical_mean", "mean"),
    LearnerSpec("glm_main_terms", "glm"),
    LearnerSpec("glm_main_plus_squares", "glm_sq"),
)


def library_from_names(names: Sequence[str]) -> tuple[LearnerSpec, ...]:
    """Build a library from the JSON config names ("mean", "glm", "glm_sq")."""
    specs = []
    for name in names:
        if name not in _JSON_NAMES:
            raise ValueError(f"unknown learner name {name!r}")
        specs.append(LearnerSpec(_JSON_NAMES[name], name))
    if len({s.label for s in specs}) != len(specs):
        raise ValueError("duplicate learner labels in library")
    return tuple(specs)


@dataclass(frozen=True)
class SLFit:
    library: tuple[LearnerSpec, ...]
    cv_risks: np.ndarray
    selected: int
    fits: tuple
    folds: np.ndarray
    terms: tuple[str, ...]

    @property
    def selected_label(self) -> str:
        return self.library[self.selected].label


def fold_assignment(y: np.ndarray, v: int, seed: int) -> np.ndarray:
    """Deterministic fold labels in {0..v-1}; stratified for binary y."""
    n = len(y)
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed % 2**64, _FOLD_STREAM], dtype=np.uint64))
    )
    folds = np.empty(n, dtype=np.intp)
    uniq = np.unique(y)
    if len(uniq) == 2 and set(uniq) <= {0.0, 1.0}:
        for cls in (1.0, 0.0):
            idx = np.flatnonzero(y == cls)
            rng.shuffle(idx)
            folds[idx] = np.arange(len(idx)) % v
    else:
        idx = rng.permutation(n)
        folds[idx] = np.arange(n) % v
    return folds


def _learner_design(spec: LearnerSpec, terms, continuous) -> DesignSpec | None:
    if spec.kind == "empirical_mean":
        return None
    if spec.kind == "glm_main_terms":
        return DesignSpec(intercept=True, terms=terms)
    squares = tuple((t, t) for t, c in zip(terms, continuous) if c)
    return DesignSpec(intercept=True, terms=terms, interactions=squares)


def _design_matrix(design: DesignSpec, cols: dict, n: int) -> np.ndarray:
    parts = [np.ones(n)]
    parts += [cols[t] for t in design.terms]
    parts += [cols[a] * cols[b] for a, b in design.interactions]
    return np.ascontiguousarray(np.column_stack(parts))


def sl_fit(X: Mapping[str, np.ndarray], y, library=DEFAULT_LIBRARY, v: int = 10, seed: int = 0) -> SLFit:
    """Cross-validate the library and refit every learner on all rows.

    Risk is the mean negative Bernoulli log-likelihood of the held-out
    predictions (clamped); a learner whose fit fails on any training fold
    receives infinite risk rather than aborting the ensemble.
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = len(y)
    if n < 2:
        raise ValueError("need at least two rows")
    if v < 2:
        raise ValueError("need at least two folds")
    if v > n:
        raise ValueError(f"fold count {v} exceeds row count {n}")
    library = tuple(library)
    if len({s.label for s in library}) != len(library):
        raise ValueError("duplicate learner labels in library")

    terms = tuple(X.keys())
    cols = {t: np.ascontiguousarray(X[t], dtype=np.float64) for t in terms}
    for t in terms:
        if cols[t].shape != (n,):
            raise ValueError(f"covariate column {t!r} has wrong length")
    continuous = tuple(len(np.unique(cols[t])) > 2 for t in terms)

    folds = fold_assignment(y, v, seed)
    designs = [_learner_design(spec, terms, continuous) for spec in library]
    matrices = {
        id(d): _design_matrix(d, cols, n) for d in designs if d is not None
    }

    ones = np.ones(n)
    zeros = np.zeros(n)
    preds = np.empty((len(library), n))
    risks = np.zeros(len(library))
    for li, design in enumerate(designs):
        failed = False
        for f in range(v):
            test = folds == f
            train = ~test
            try:
                if design is None:
                    p = float(np.mean(y[train]))
                    preds[li, test] = p
                else:
                    Xm = matrices[id(design)]
                    Xtr = np.ascontiguousarray(Xm[train])
                    beta, _, _, _, _ = fit_matrix(
                        Xtr, y[train], ones[train], zeros[train], LINK_LOGIT
                    )
                    lin = Xm[test] @ beta
                    preds[li, test] = _stable_expit(lin)
            except Exception:
                failed = True
                break
        if failed:
            risks[li] = np.inf
            continue
        p = np.clip(preds[li], PROB_CLAMP, 1.0 - PROB_CLAMP)
        risks[li] = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))

    selected = int(np.argmin(risks))
    if not np.isfinite(risks[selected]):
        raise RuntimeError("every learner in the library failed")

    fits = []
    for spec, design in zip(library, designs):
        if design is None:
            fits.append(float(np.mean(y)))
            continue
        Xm = matrices[id(design)]
        beta, dropped, dev, iters, conv = fit_matrix(Xm, y, ones, zeros, LINK_LOGIT)
        names = design.column_names()
        fits.append(
            GlmFit(
                spec=design,
                link="logit",
                coefficients=beta,
                converged=bool(conv),
                iterations=int(iters),
                dropped=tuple(nm for nm, d in zip(names, dropped) if d),
                deviance=float(dev),
            )
        )

    return SLFit(
        library=library,
        cv_risks=risks,
        selected=selected,
        fits=tuple(fits),
        folds=folds,
        terms=terms,
    )


def sl_predict(fit: SLFit, X: Mapping[str, np.ndarray], n_rows: int | None = None) -> np.ndarray:
    """Predict with the selected learner; probabilities in the clamp range.

    ``n_rows`` disambiguates predictions from an empty covariate table
    (empty adjustment sets degenerate to intercept-only learners).
    """
    if n_rows is None:
        if not X:
            raise ValueError("cannot infer row count from an empty covariate table")
        n_rows = len(next(iter(X.values())))
    chosen = fit.fits[fit.selected]
    if isinstance(chosen, float):
        p = np.full(n_rows, chosen)
    else:
        p = predict(chosen, X, n_rows=n_rows)
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
