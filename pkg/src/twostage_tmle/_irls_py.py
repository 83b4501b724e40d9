"""Pure-numpy weighted-IRLS kernel; reference implementation and fallback.

The compiled kernel in ``_core/irls_kernel.pyx`` mirrors this module
operation for operation. Shared contract:

* links: ``LINK_LOGIT`` (quasi-binomial, responses anywhere in [0, 1]) and
  ``LINK_LOG`` (Poisson-type count working model);
* start at ``beta = 0`` so the initial fit is the inverse link of the offset;
* fitted means are clamped to [MU_EPS, 1 - MU_EPS] for logit and to
  [MU_EPS, exp(ETA_LOG_MAX)] for log, which is how complete separation is
  absorbed instead of aborting;
* each Newton/IRLS proposal is step-halved until the deviance does not
  increase, so deviance is non-increasing across accepted steps;
* convergence requires both a relative deviance change below ``tol`` and
  per-coordinate score residuals |sum_i w_i x_ij (y_i - mu_i)| <= SCORE_TOL,
  which keeps downstream fluctuation-step score equations tight;
* inside the normal-equations Cholesky, a pivot falling below PIVOT_RTOL of
  its original diagonal marks that column as collinear with earlier ones;
  its coefficient is pinned to zero (later columns lose to earlier ones).
"""

from __future__ import annotations

import numpy as np

LINK_LOGIT = 0
LINK_LOG = 1

# Contract constants; the compiled kernel carries the same values.
MU_EPS = 1e-8
ETA_LOG_MAX = 30.0
PIVOT_RTOL = 1e-9
SCORE_TOL = 1e-7
MAX_HALVINGS = 30


def _fitted(X, offset, beta, link):
    eta = offset + X @ beta
    if link == LINK_LOGIT:
        mu = np.clip(_expit(eta), MU_EPS, 1.0 - MU_EPS)
    else:
        mu = np.maximum(np.exp(np.minimum(eta, ETA_LOG_MAX)), MU_EPS)
    return eta, mu


def _expit(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _deviance(y, mu, w, link):
    if link == LINK_LOGIT:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0.0, y * np.log(y / mu), 0.0)
            d = d + np.where(y < 1.0, (1.0 - y) * np.log((1.0 - y) / (1.0 - mu)), 0.0)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0.0, y * np.log(y / mu), 0.0) - (y - mu)
    return float(2.0 * np.sum(np.where(w == 0.0, 0.0, w * d)))


def _chol_solve_drop(G, c):
    """Solve G beta = c, dropping trailing collinear columns (pivot test)."""
    k = G.shape[0]
    L = np.zeros((k, k))
    dropped = np.zeros(k, dtype=np.uint8)
    for j in range(k):
        d = G[j, j] - np.sum(L[j, :j] ** 2)
        if G[j, j] <= 0.0 or d <= PIVOT_RTOL * G[j, j]:
            dropped[j] = 1
            continue
        L[j, j] = np.sqrt(d)
        if j + 1 < k:
            L[j + 1 :, j] = (G[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    # Zero the rows/cols of dropped pivots so the triangular solves skip them.
    for j in range(k):
        if dropped[j]:
            L[j, :] = 0.0
            L[:, j] = 0.0
    tmp = np.zeros(k)
    for j in range(k):
        if dropped[j]:
            continue
        tmp[j] = (c[j] - L[j, :j] @ tmp[:j]) / L[j, j]
    beta = np.zeros(k)
    for j in range(k - 1, -1, -1):
        if dropped[j]:
            continue
        beta[j] = (tmp[j] - L[j + 1 :, j] @ beta[j + 1 :]) / L[j, j]
    return beta, dropped


def irls(X, y, w, offset, link, max_iter, tol):
    """Weighted IRLS fit.

    Parameters
    ----------
    X : (n, k) float64, C-contiguous design matrix (k >= 1)
    y : (n,) responses; in [0, 1] for logit, nonnegative for log
    w : (n,) nonnegative prior weights (zero-weight rows are inert)
    offset : (n,) fixed offset added to the linear predictor
    link : LINK_LOGIT or LINK_LOG
    max_iter, tol : iteration cap and relative-deviance tolerance

    Returns
    -------
    (beta, dropped, deviance, iterations, converged) where ``beta`` has a
    zero in every dropped coordinate and ``dropped`` is a uint8 mask.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, k = X.shape
    beta = np.zeros(k)
    dropped = np.zeros(k, dtype=np.uint8)
    eta, mu = _fitted(X, offset, beta, link)
    dev = _deviance(y, mu, w, link)
    converged = False
    it = 0

    def score(mu_now):
        return X.T @ (w * (y - mu_now))

    while it < max_iter:
        it += 1
        v = mu * (1.0 - mu) if link == LINK_LOGIT else mu
        wirls = w * v
        z = (eta - offset) + (y - mu) / v
        Xw = X * wirls[:, None]
        G = Xw.T @ X
        c = Xw.T @ z
        beta_new, dropped = _chol_solve_drop(G, c)

        accepted = False
        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + step * (beta_new - beta)
            eta, mu = _fitted(X, offset, cand, link)
            dev_new = _deviance(y, mu, w, link)
            if dev_new <= dev + 1e-10 * (1.0 + abs(dev)):
                accepted = True
                break
            step *= 0.5

        if not accepted:
            eta, mu = _fitted(X, offset, beta, link)
            sc = score(mu)
            converged = bool(np.max(np.abs(sc[dropped == 0]), initial=0.0) <= SCORE_TOL)
            break

        relchange = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        beta = cand
        dev = dev_new

        if relchange < tol:
            # Deviance has settled; also require tight score equations.
            sc = score(mu)
            if np.max(np.abs(sc[dropped == 0]), initial=0.0) <= SCORE_TOL:
                converged = True
                break
            if relchange == 0.0:
                break  # fitted values pinned at the clamp; no progress possible

    return beta, dropped, dev, it, converged
