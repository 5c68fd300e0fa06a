"""Compiled per-batch kernels for the online update.

The online update runs once per arriving batch on small arrays, where the
fixed cost of many numpy calls dominates.  These kernels fuse the score,
sensitivity and variability sums into a single pass and run the whole
Newton loop of one update without returning to Python.  They mirror the
vectorised reference in :mod:`streamcausal.scores` exactly; the test-suite
checks one against the other.
"""

from __future__ import annotations

import math

import numba
import numpy as np

GCOMP, IPTW, AIPTW = 0, 1, 2

OK = 0
POSITIVITY = 1
NO_CONVERGENCE = 2
SINGULAR = 3
NON_FINITE = 4


@numba.njit(cache=True)
def _expit(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@numba.njit(cache=True)
def accumulate(family, binary, x, a, y, theta, eps, u, s, m, with_m):
    """Add the batch sums at ``theta`` to ``u``, ``s`` (and ``m``).

    Returns ``-1`` on success, otherwise the index of the first observation
    whose propensity score breaks the positivity guard.
    """
    n, p = x.shape
    d = theta.shape[0]
    has_alpha = family != GCOMP
    has_beta = family != IPTW
    a0 = 0
    b0 = p if has_alpha else 0
    b1 = b0 + p
    delta = theta[d - 1]
    score = np.empty(d)
    for i in range(n):
        ai = a[i]
        yi = y[i]
        e = 0.5
        if has_alpha:
            z = 0.0
            for k in range(p):
                z += x[i, k] * theta[a0 + k]
            e = _expit(z)
            if e <= eps or e >= 1.0 - eps:
                return i
        mu = mu1 = mu0 = 0.0
        dmu = dmu1 = dmu0 = 0.0
        if has_beta:
            l0 = 0.0
            l1 = 0.0
            for k in range(p):
                l0 += x[i, k] * theta[b0 + k]
                l1 += x[i, k] * theta[b1 + k]
            l1 += l0
            if binary:
                mu1 = _expit(l1)
                mu0 = _expit(l0)
                dmu1 = mu1 * (1.0 - mu1)
                dmu0 = mu0 * (1.0 - mu0)
            else:
                mu1 = l1
                mu0 = l0
                dmu1 = 1.0
                dmu0 = 1.0
            if ai == 1.0:
                mu = mu1
                dmu = dmu1
            else:
                mu = mu0
                dmu = dmu0

        # scores
        if has_alpha:
            r = ai - e
            for k in range(p):
                score[a0 + k] = x[i, k] * r
        if has_beta:
            r = yi - mu
            for k in range(p):
                score[b0 + k] = x[i, k] * r
                score[b1 + k] = x[i, k] * ai * r
        if family == GCOMP:
            ate = mu1 - mu0 - delta
        elif family == IPTW:
            ate = ai * yi / e - (1.0 - ai) * yi / (1.0 - e) - delta
        else:
            ate = mu1 + ai * (yi - mu1) / e - mu0 - (1.0 - ai) * (yi - mu0) / (1.0 - e) - delta
        score[d - 1] = ate
        for k in range(d):
            u[k] += score[k]
        if with_m:
            for k in range(d):
                sk = score[k]
                for l in range(d):
                    m[k, l] += sk * score[l]

        # sensitivity
        s[d - 1, d - 1] += 1.0
        if has_alpha:
            w1 = e * (1.0 - e)
            if family == IPTW:
                w2 = ai * yi * (1.0 - e) / e + (1.0 - ai) * yi * e / (1.0 - e)
            else:
                w2 = ai * (yi - mu1) * (1.0 - e) / e + (1.0 - ai) * (yi - mu0) * e / (1.0 - e)
            for k in range(p):
                xk = x[i, k]
                for l in range(p):
                    s[a0 + k, a0 + l] += w1 * xk * x[i, l]
                s[d - 1, a0 + k] += w2 * xk
        if has_beta:
            if family == GCOMP:
                c1 = dmu1
                c0 = dmu0
            else:
                c1 = dmu1 * (1.0 - ai / e)
                c0 = dmu0 * (1.0 - (1.0 - ai) / (1.0 - e))
            for k in range(p):
                xk = x[i, k]
                for l in range(p):
                    g = dmu * xk * x[i, l]
                    s[b0 + k, b0 + l] += g
                    if ai == 1.0:
                        s[b0 + k, b1 + l] += g
                        s[b1 + k, b0 + l] += g
                        s[b1 + k, b1 + l] += g
                s[d - 1, b0 + k] -= (c1 - c0) * xk
                s[d - 1, b1 + k] -= c1 * xk
    return -1


@numba.njit(cache=True)
def _all_finite(arr):
    for v in arr.ravel():
        if not math.isfinite(v):
            return False
    return True


@numba.njit(cache=True)
def renew_batch(family, binary, x, a, y, prev, s_prev, eps, tol, max_iter):
    """One online update.

    Returns ``(status, detail, iterations, step_norm, theta, s_batch, m_batch)``
    where ``s_batch`` and ``m_batch`` are the batch sums at the final
    ``theta``.  ``detail`` is the offending observation for positivity
    failures.
    """
    d = prev.shape[0]
    theta = prev.copy()
    u = np.zeros(d)
    s = np.zeros((d, d))
    m = np.zeros((d, d))
    step_norm = np.inf
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        u[:] = 0.0
        s[:, :] = 0.0
        bad = accumulate(family, binary, x, a, y, theta, eps, u, s, m, False)
        if bad >= 0:
            return POSITIVITY, bad, it, step_norm, theta, s, m
        rhs = s_prev @ (prev - theta) + u
        jac = s_prev + s
        if not (_all_finite(rhs) and _all_finite(jac)):
            return NON_FINITE, -1, it, step_norm, theta, s, m
        step = np.linalg.solve(jac, rhs)
        if not _all_finite(step):
            return SINGULAR, -1, it, step_norm, theta, s, m
        theta = theta + step
        step_norm = 0.0
        for k in range(d):
            step_norm = max(step_norm, abs(step[k]))
        if step_norm < tol:
            converged = True
            break
    if not converged:
        return NO_CONVERGENCE, -1, it, step_norm, theta, s, m
    u[:] = 0.0
    s[:, :] = 0.0
    m[:, :] = 0.0
    bad = accumulate(family, binary, x, a, y, theta, eps, u, s, m, True)
    if bad >= 0:
        return POSITIVITY, bad, it, step_norm, theta, s, m
    if not (_all_finite(s) and _all_finite(m)):
        return NON_FINITE, -1, it, step_norm, theta, s, m
    return OK, -1, it, step_norm, theta, s, m
