# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled weighted-IRLS kernel for logit- and log-link working regressions.

This is the hot loop of the whole package: every Super Learner fold fit,
every fluctuation step and every comparator working regression lands here.
The semantics must stay in lockstep with the pure-python fallback in
``twostage_tmle._irls_py`` (same clamps, same pivot/drop rule, same
convergence test); the fallback docstring is the reference description.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, sqrt

cnp.import_array()

# Contract constants; _irls_py.py carries the same values.
cdef double MU_EPS = 1e-8
cdef double ETA_LOG_MAX = 30.0
cdef double PIVOT_RTOL = 1e-9
cdef double SCORE_TOL = 1e-7
cdef int MAX_HALVINGS = 30

LINK_LOGIT = 0
LINK_LOG = 1


cdef inline double _mu_logit(double eta) noexcept nogil:
    cdef double mu
    if eta >= 0.0:
        mu = 1.0 / (1.0 + exp(-eta))
    else:
        mu = exp(eta)
        mu = mu / (1.0 + mu)
    if mu < MU_EPS:
        mu = MU_EPS
    elif mu > 1.0 - MU_EPS:
        mu = 1.0 - MU_EPS
    return mu


cdef inline double _mu_log(double eta) noexcept nogil:
    cdef double mu
    if eta > ETA_LOG_MAX:
        eta = ETA_LOG_MAX
    mu = exp(eta)
    if mu < MU_EPS:
        mu = MU_EPS
    return mu


cdef double _deviance(double[::1] y, double[::1] mu, double[::1] w,
                      int n, int link) noexcept nogil:
    cdef double dev = 0.0, d, yi
    cdef int i
    for i in range(n):
        if w[i] == 0.0:
            continue
        yi = y[i]
        d = 0.0
        if link == 0:
            if yi > 0.0:
                d += yi * log(yi / mu[i])
            if yi < 1.0:
                d += (1.0 - yi) * log((1.0 - yi) / (1.0 - mu[i]))
        else:
            if yi > 0.0:
                d += yi * log(yi / mu[i])
            d -= yi - mu[i]
        dev += 2.0 * w[i] * d
    return dev


cdef void _update_fit(double[:, ::1] X, double[::1] offset, double[::1] beta,
                      double[::1] eta, double[::1] mu, int n, int k,
                      int link) noexcept nogil:
    cdef int i, a
    cdef double e
    for i in range(n):
        e = offset[i]
        for a in range(k):
            e += X[i, a] * beta[a]
        eta[i] = e
        mu[i] = _mu_logit(e) if link == 0 else _mu_log(e)


cdef void _chol_solve_drop(double[:, ::1] G, double[::1] c, double[::1] beta,
                           cnp.uint8_t[::1] dropped, double[:, ::1] L,
                           double[::1] tmp, int k) noexcept nogil:
    """Cholesky of G with column dropping: a pivot that collapses below
    PIVOT_RTOL of its original diagonal marks the column linearly dependent
    on earlier ones; its coefficient is pinned to zero (later columns lose)."""
    cdef int i, j, l
    cdef double d, s
    for j in range(k):
        d = G[j, j]
        for l in range(j):
            if not dropped[l]:
                d -= L[j, l] * L[j, l]
        if G[j, j] <= 0.0 or d <= PIVOT_RTOL * G[j, j]:
            dropped[j] = 1
            continue
        dropped[j] = 0
        L[j, j] = sqrt(d)
        for i in range(j + 1, k):
            s = G[i, j]
            for l in range(j):
                if not dropped[l]:
                    s -= L[i, l] * L[j, l]
            L[i, j] = s / L[j, j]
    for j in range(k):
        if dropped[j]:
            tmp[j] = 0.0
            continue
        s = c[j]
        for l in range(j):
            if not dropped[l]:
                s -= L[j, l] * tmp[l]
        tmp[j] = s / L[j, j]
    for j in range(k - 1, -1, -1):
        if dropped[j]:
            beta[j] = 0.0
            continue
        s = tmp[j]
        for i in range(j + 1, k):
            if not dropped[i]:
                s -= L[i, j] * beta[i]
        beta[j] = s / L[j, j]


def irls(double[:, ::1] X, double[::1] y, double[::1] w, double[::1] offset,
         int link, int max_iter, double tol):
    """Fit the weighted GLM by IRLS with step-halving; see _irls_py.irls."""
    cdef int n = X.shape[0]
    cdef int k = X.shape[1]
    beta_np = np.zeros(k)
    dropped_np = np.zeros(k, dtype=np.uint8)
    cdef double[::1] beta = beta_np
    cdef cnp.uint8_t[::1] dropped = dropped_np
    cdef double[::1] beta_new = np.zeros(k)
    cdef double[::1] cand = np.zeros(k)
    cdef double[::1] cvec = np.zeros(k)
    cdef double[::1] tmp = np.zeros(k)
    cdef double[:, ::1] G = np.zeros((k, k))
    cdef double[:, ::1] L = np.zeros((k, k))
    cdef double[::1] eta = np.empty(n)
    cdef double[::1] mu = np.empty(n)

    cdef double dev, dev_new, relchange, step, v, wi, zi, xa, s
    cdef int it = 0, i, a, b, h
    cdef bint converged = False, accepted, score_ok

    with nogil:
        _update_fit(X, offset, beta, eta, mu, n, k, link)
        dev = _deviance(y, mu, w, n, link)

        while it < max_iter:
            it += 1
            for a in range(k):
                cvec[a] = 0.0
                for b in range(k):
                    G[a, b] = 0.0
            for i in range(n):
                v = mu[i] * (1.0 - mu[i]) if link == 0 else mu[i]
                wi = w[i] * v
                if wi <= 0.0:
                    continue
                zi = (eta[i] - offset[i]) + (y[i] - mu[i]) / v
                for a in range(k):
                    xa = X[i, a]
                    cvec[a] += wi * xa * zi
                    for b in range(a, k):
                        G[a, b] += wi * xa * X[i, b]
            for a in range(k):
                for b in range(a + 1, k):
                    G[b, a] = G[a, b]

            _chol_solve_drop(G, cvec, beta_new, dropped, L, tmp, k)

            accepted = False
            step = 1.0
            dev_new = dev
            for h in range(MAX_HALVINGS + 1):
                for a in range(k):
                    cand[a] = beta[a] + step * (beta_new[a] - beta[a])
                _update_fit(X, offset, cand, eta, mu, n, k, link)
                dev_new = _deviance(y, mu, w, n, link)
                if dev_new <= dev + 1e-10 * (1.0 + fabs(dev)):
                    accepted = True
                    break
                step *= 0.5

            if not accepted:
                # No descent direction left; restore state for current beta.
                _update_fit(X, offset, beta, eta, mu, n, k, link)
                score_ok = True
                for a in range(k):
                    if dropped[a]:
                        continue
                    s = 0.0
                    for i in range(n):
                        s += w[i] * (y[i] - mu[i]) * X[i, a]
                    if fabs(s) > SCORE_TOL:
                        score_ok = False
                        break
                converged = score_ok
                break

            relchange = fabs(dev - dev_new) / (fabs(dev_new) + 0.1)
            for a in range(k):
                beta[a] = cand[a]
            dev = dev_new

            if relchange < tol:
                # Deviance has settled; also require tight score equations.
                score_ok = True
                for a in range(k):
                    if dropped[a]:
                        continue
                    s = 0.0
                    for i in range(n):
                        s += w[i] * (y[i] - mu[i]) * X[i, a]
                    if fabs(s) > SCORE_TOL:
                        score_ok = False
                        break
                if score_ok:
                    converged = True
                    break
                if relchange == 0.0:
                    # Fitted values pinned at the probability clamp.
                    break

    return beta_np, dropped_np, dev, it, bool(converged)
