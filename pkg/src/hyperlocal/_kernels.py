"""Compiled Kalman recursions over per-cell sufficient statistics.

All kernels take a diagonal transition (vector ``a``), a dense innovation
covariance ``Q``, per-stream observation variances ``R`` and time-major
``(T, p)`` arrays of cell means and counts. A cell with count 0 contributes
no observation. Kernels return a status code instead of raising:
0 ok, otherwise ``-(t + 1)`` for a factorization failure at step ``t``.
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
JITTER = 1e-10


@njit(cache=True, nogil=True)
def _chol_inplace(S, n):
    # lower Cholesky of S[:n, :n]; returns False on a non-positive pivot
    for j in range(n):
        d = S[j, j]
        for k in range(j):
            d -= S[j, k] * S[j, k]
        if not d > 0.0:
            return False
        d = math.sqrt(d)
        S[j, j] = d
        for i in range(j + 1, n):
            s = S[i, j]
            for k in range(j):
                s -= S[i, k] * S[j, k]
            S[i, j] = s / d
        for i in range(j):
            S[i, j] = 0.0
    return True


@njit(cache=True, nogil=True)
def _chol_jitter(S, n, work):
    # factor S[:n,:n] into work, one retry with trace-scaled jitter
    for i in range(n):
        for j in range(n):
            work[i, j] = S[i, j]
    if _chol_inplace(work, n):
        return True
    tr = 0.0
    for i in range(n):
        tr += S[i, i]
    eps = JITTER * abs(tr)
    for i in range(n):
        for j in range(n):
            work[i, j] = S[i, j]
        work[i, i] += eps
    return _chol_inplace(work, n)


@njit(cache=True, nogil=True)
def _forward_sub(Lm, n, b):
    # solve Lm[:n,:n] x = b in place
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= Lm[i, k] * b[k]
        b[i] = s / Lm[i, i]


@njit(cache=True, nogil=True)
def _step(a, Q, R, ybar_t, L_t, mu, V, mu_p, V_p, S, Lw, G, w, idx):
    """One predict/update step; mutates mu, V. Returns (status, loglik increment)."""
    p = a.shape[0]
    for i in range(p):
        mu_p[i] = a[i] * mu[i]
        for j in range(p):
            V_p[i, j] = a[i] * a[j] * V[i, j] + Q[i, j]
    n = 0
    for i in range(p):
        if L_t[i] > 0:
            idx[n] = i
            n += 1
    if n == 0:
        for i in range(p):
            mu[i] = mu_p[i]
            for j in range(p):
                V[i, j] = V_p[i, j]
        return 0, 0.0
    for r in range(n):
        ir = idx[r]
        for c in range(n):
            S[r, c] = V_p[ir, idx[c]]
        S[r, r] += R[ir] / L_t[ir]
    if not _chol_jitter(S, n, Lw):
        return 1, 0.0
    logdet = 0.0
    for r in range(n):
        logdet += 2.0 * math.log(Lw[r, r])
        w[r] = ybar_t[idx[r]] - mu_p[idx[r]]
    _forward_sub(Lw, n, w)
    quad = 0.0
    for r in range(n):
        quad += w[r] * w[r]
    # G = Lw^{-1} V_p[idx, :]
    for c in range(p):
        for r in range(n):
            s = V_p[idx[r], c]
            for k in range(r):
                s -= Lw[r, k] * G[k, c]
            G[r, c] = s / Lw[r, r]
    for i in range(p):
        s = mu_p[i]
        for r in range(n):
            s += G[r, i] * w[r]
        mu[i] = s
    for i in range(p):
        for j in range(i, p):
            s = V_p[i, j]
            for r in range(n):
                s -= G[r, i] * G[r, j]
            V[i, j] = s
            V[j, i] = s
    return 0, -0.5 * (n * LOG_2PI + logdet + quad)


@njit(cache=True, nogil=True)
def suffstat_loglik(a, Q, R, ybar, L, m0, V0):
    """Marginal log-likelihood of the cell means (no within-cell term)."""
    T, p = ybar.shape
    mu = m0.copy()
    V = V0.copy()
    mu_p = np.empty(p)
    V_p = np.empty((p, p))
    S = np.empty((p, p))
    Lw = np.empty((p, p))
    G = np.empty((p, p))
    w = np.empty(p)
    idx = np.empty(p, dtype=np.int64)
    ll = 0.0
    for t in range(T):
        status, inc = _step(a, Q, R, ybar[t], L[t], mu, V, mu_p, V_p, S, Lw, G, w, idx)
        if status != 0:
            return -(t + 1), 0.0
        ll += inc
    return 0, ll


@njit(cache=True, nogil=True)
def suffstat_filter(a, Q, R, ybar, L, m0, V0):
    """Full forward pass; returns status, loglik and the four moment arrays."""
    T, p = ybar.shape
    mu = m0.copy()
    V = V0.copy()
    mu_p = np.empty(p)
    V_p = np.empty((p, p))
    S = np.empty((p, p))
    Lw = np.empty((p, p))
    G = np.empty((p, p))
    w = np.empty(p)
    idx = np.empty(p, dtype=np.int64)
    mf = np.empty((T, p))
    Vf = np.empty((T, p, p))
    mp = np.empty((T, p))
    Vp = np.empty((T, p, p))
    ll = 0.0
    for t in range(T):
        status, inc = _step(a, Q, R, ybar[t], L[t], mu, V, mu_p, V_p, S, Lw, G, w, idx)
        if status != 0:
            return -(t + 1), 0.0, mf, Vf, mp, Vp
        ll += inc
        mf[t] = mu
        Vf[t] = V
        mp[t] = mu_p
        Vp[t] = V_p
    return 0, ll, mf, Vf, mp, Vp


@njit(cache=True, nogil=True)
def _psd_factor(C, n, out):
    # Cholesky that zeroes columns with negligible pivots (PSD square root)
    scale = 0.0
    for i in range(n):
        if C[i, i] > scale:
            scale = C[i, i]
    tol = 1e-13 * scale
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.0
    for j in range(n):
        d = C[j, j]
        for k in range(j):
            d -= out[j, k] * out[j, k]
        if d <= tol:
            continue
        d = math.sqrt(d)
        out[j, j] = d
        for i in range(j + 1, n):
            s = C[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            out[i, j] = s / d


@njit(cache=True, nogil=True)
def backward_sample(a, m0, V0, mf, Vf, mp, Vp, z):
    """Backward pass of FFBS given standard normal draws ``z`` of shape (T+1, p).

    Row 0 of the result is the initial state; row ``t`` is month ``t - 1``.
    """
    T, p = mf.shape
    x = np.empty((T + 1, p))
    F = np.empty((p, p))
    _psd_factor(Vf[T - 1], p, F)
    for i in range(p):
        s = mf[T - 1, i]
        for k in range(i + 1):
            s += F[i, k] * z[T, k]
        x[T, i] = s
    Lw = np.empty((p, p))
    M = np.empty((p, p))
    C = np.empty((p, p))
    d = np.empty(p)
    for tt in range(T - 1, -1, -1):
        # filtered moments at full-time index tt (0 = initial prior)
        if tt == 0:
            mft = m0
            Vft = V0
        else:
            mft = mf[tt - 1]
            Vft = Vf[tt - 1]
        if not _chol_jitter(Vp[tt], p, Lw):
            return -(tt + 1), x
        # M = Lw^{-1} (A Vft)
        for c in range(p):
            for r in range(p):
                s = a[r] * Vft[r, c]
                for k in range(r):
                    s -= Lw[r, k] * M[k, c]
                M[r, c] = s / Lw[r, r]
        for r in range(p):
            d[r] = x[tt + 1, r] - mp[tt, r]
        _forward_sub(Lw, p, d)
        for i in range(p):
            for j in range(i, p):
                s = Vft[i, j]
                for r in range(p):
                    s -= M[r, i] * M[r, j]
                C[i, j] = s
                C[j, i] = s
        _psd_factor(C, p, F)
        for i in range(p):
            s = mft[i]
            for r in range(p):
                s += M[r, i] * d[r]
            for k in range(i + 1):
                s += F[i, k] * z[tt, k]
            x[tt, i] = s
    return 0, x
