"""Deterministic weighted GLM fitting for every working regression.

Two links are supported: ``logit`` (quasi-binomial IRLS, so responses may be
non-integer proportions in [0, 1] -- cluster-level endpoints are regressed
this way) and ``log`` (Poisson-type count working model used by the
relative-risk comparator). Fits accept prior weights and a fixed offset,
which is all the fluctuation steps of the targeted estimators need.

Design matrices are described by :class:`DesignSpec` and resolved against a
column table (any mapping from name to 1-d array). Rank-deficient designs
drop trailing collinear columns with a warning; fitted probabilities are
clamped inside the IRLS loop, so complete separation degrades gracefully
instead of aborting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ._backend import LINK_LOG, LINK_LOGIT, irls

MAX_ITER = 50
TOL = 1e-8

_LINK_CODES = {"logit": LINK_LOGIT, "log": LINK_LOG}


class CollinearityWarning(UserWarning):
    """Raised (as a warning) when collinear design columns are dropped."""


def expit(x):
    """Numerically stable inverse logit (input capped so exp never overflows)."""
    x = np.asarray(x, dtype=np.float64)
    out = 1.0 / (1.0 + np.exp(-x.clip(-709.0, 709.0)))
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p / (1.0 - p))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class DesignSpec:
    """Specification of a working-regression design.

    ``terms`` are covariate names resolved against the supplied column
    table; ``interactions`` are name pairs whose elementwise product enters
    as an extra column (a pair with equal names yields a squared term).
    """

    intercept: bool = True
    terms: tuple[str, ...] = ()
    interactions: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(
            self, "interactions", tuple(tuple(p) for p in self.interactions)
        )
        if len(set(self.terms)) != len(self.terms):
            raise ValueError("duplicate term names in design")

    def column_names(self) -> tuple[str, ...]:
        names = ("(intercept)",) if self.intercept else ()
        names += self.terms
        names += tuple(f"{a}:{b}" for a, b in self.interactions)
        return names


@dataclass(frozen=True)
class GlmFit:
    """A fitted working GLM: coefficients aligned to ``spec.column_names()``.

    Dropped (collinear) columns keep a zero coefficient, so prediction is
    always ``X @ coefficients`` over the full design. ``deviance`` is the
    final (quasi-)deviance, kept for diagnostics.
    """

    spec: DesignSpec
    link: str
    coefficients: np.ndarray
    converged: bool
    iterations: int
    dropped: tuple[str, ...] = ()
    deviance: float = float("nan")


def build_design(spec: DesignSpec, table: Mapping[str, np.ndarray], n_rows: int):
    """Resolve a DesignSpec against a column table into a dense matrix."""
    cols = []
    if spec.intercept:
        cols.append(np.ones(n_rows))
    for name in spec.terms:
        cols.append(_column(table, name, n_rows))
    for a, b in spec.interactions:
        cols.append(_column(table, a, n_rows) * _column(table, b, n_rows))
    if not cols:
        raise ValueError("design has no columns (no intercept, terms, or interactions)")
    return np.ascontiguousarray(np.column_stack(cols))


def _column(table, name, n_rows):
    try:
        col = np.asarray(table[name], dtype=np.float64)
    except KeyError:
        raise ValueError(f"covariate column not found: {name!r}") from None
    if col.shape != (n_rows,):
        raise ValueError(f"covariate column {name!r} has wrong length")
    return col


def fit_glm(design, link, X, y, weights=None, offset=None) -> GlmFit:
    """Fit a weighted GLM by IRLS (max 50 iterations, relative deviance
    tolerance 1e-8, step-halving on deviance increase).

    Parameters
    ----------
    design : DesignSpec
    link : "logit" or "log"
    X : mapping of covariate name -> 1-d array (may be empty for
        intercept-only fits)
    y : responses; in [0, 1] for logit, nonnegative counts for log
    weights : optional nonnegative prior weights (default all ones)
    offset : optional fixed offset on the linear-predictor scale

    Non-convergence is not an error: the fit is returned with
    ``converged=False`` and callers decide.
    """
    if link not in _LINK_CODES:
        raise ValueError(f"unknown link {link!r}")
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty data")
    if link == "logit" and (np.min(y) < 0.0 or np.max(y) > 1.0):
        raise ValueError("logit-link responses must lie in [0, 1]")
    if link == "log" and np.min(y) < 0.0:
        raise ValueError("log-link responses must be nonnegative")
    w = np.ones(n) if weights is None else np.ascontiguousarray(weights, dtype=np.float64)
    o = np.zeros(n) if offset is None else np.ascontiguousarray(offset, dtype=np.float64)
    if w.shape != (n,) or o.shape != (n,):
        raise ValueError("y, weights, and offset must have equal length")
    if np.min(w) < 0.0:
        raise ValueError("weights must be nonnegative")
    if not np.any(w > 0.0):
        raise ValueError("at least one weight must be positive")

    Xmat = build_design(design, X, n)
    beta, dropped, dev, iters, converged = irls(
        Xmat, y, w, o, _LINK_CODES[link], MAX_ITER, TOL
    )
    names = design.column_names()
    dropped_names = tuple(nm for nm, d in zip(names, dropped) if d)
    if dropped_names:
        warnings.warn(
            f"dropped collinear design columns: {', '.join(dropped_names)}",
            CollinearityWarning,
            stacklevel=2,
        )
    if not np.all(np.isfinite(beta)):
        raise ArithmeticError("IRLS produced non-finite coefficients")
    return GlmFit(
        spec=design,
        link=link,
        coefficients=beta,
        converged=bool(converged),
        iterations=int(iters),
        dropped=dropped_names,
        deviance=float(dev),
    )


def predict(fit: GlmFit, X, type: str = "response", n_rows: int | None = None):
    """Evaluate a fitted GLM on new rows.

    ``type="linear"`` returns the linear predictor (no offset); "response"
    applies the inverse link. ``n_rows`` disambiguates intercept-only fits
    evaluated on an empty covariate table.
    """
    if type not in ("response", "linear"):
        raise ValueError(f"unknown prediction type {type!r}")
    n = _table_rows(X, fit.spec) if n_rows is None else n_rows
    Xmat = build_design(fit.spec, X, n)
    linear = Xmat @ fit.coefficients
    if type == "linear":
        return linear
    return expit(linear) if fit.link == "logit" else np.exp(linear)


def _table_rows(table, spec: DesignSpec) -> int:
    for name in spec.terms:
        if name in table:
            return int(np.asarray(table[name]).shape[0])
    for a, _ in spec.interactions:
        if a in table:
            return int(np.asarray(table[a]).shape[0])
    for col in table.values():
        return int(np.asarray(col).shape[0])
    raise ValueError("cannot infer row count from an empty covariate table")


def fit_matrix(Xmat, y, weights, offset, link_code):
    """Low-level entry used by the package internals: fit a prebuilt,
    C-contiguous design matrix, skipping table resolution and warnings.

    Returns the raw kernel tuple (beta, dropped, deviance, iters, converged).
    """
    return irls(Xmat, y, weights, offset, link_code, MAX_ITER, TOL)
