"""Brute-force reference computations used by the test-suite.

Nothing here shares code with the recursions under test: the joint law of
all observations is built explicitly and evaluated with scipy.
"""

import numpy as np
from scipy import stats

from hyperlocal.ingest import build_panel
from hyperlocal.ssm import ClusterView, InitialStatePrior


def state_cov(a, Q, V0, T):
    """Covariance of the stacked states x_0..x_T, shape ((T+1)p, (T+1)p)."""
    p = len(a)
    n = (T + 1) * p
    # x = M xi with xi = (x_0, w_1, ..., w_T)
    M = np.zeros((n, n))
    Apow = [np.diag(a ** k) for k in range(T + 1)]
    for t in range(T + 1):
        M[t * p:(t + 1) * p, 0:p] = Apow[t]
        for s in range(1, t + 1):
            M[t * p:(t + 1) * p, s * p:(s + 1) * p] = Apow[t - s]
    Sxi = np.zeros((n, n))
    Sxi[:p, :p] = V0
    for s in range(1, T + 1):
        Sxi[s * p:(s + 1) * p, s * p:(s + 1) * p] = Q
    return M @ Sxi @ M.T, M


def dense_obs_moments(view, panel, init, subset=None):
    """Mean and covariance of all observations of the cluster's members."""
    members = list(view.members)
    pos = {m: k for k, m in enumerate(members)}
    beta = panel.beta[view.members] if view.beta is None else view.beta
    p, T = len(members), panel.T
    C, M = state_cov(view.a, view.Q, init.cov, T)
    mean_x = M[:, :p] @ init.mean
    rows, means, rvar = [], [], []
    for j in range(panel.n_obs):
        r = int(panel.obs_region[j])
        if r not in pos or (subset is not None and r not in subset):
            continue
        k = pos[r]
        t = int(panel.obs_month[j]) + 1
        idx = t * p + k
        rows.append(idx)
        off = float(panel.u[j] @ beta[k]) if panel.H else 0.0
        means.append(mean_x[idx] + off)
        rvar.append(view.R[k])
        means[-1] = means[-1]
    rows = np.array(rows, dtype=int)
    mu = np.array(means)
    S = C[np.ix_(rows, rows)] + np.diag(rvar)
    obs = np.array([panel.y[j] for j in range(panel.n_obs)
                    if int(panel.obs_region[j]) in pos
                    and (subset is None or int(panel.obs_region[j]) in subset)])
    return obs, mu, S


def dense_loglik(view, panel, init, subset=None):
    y, mu, S = dense_obs_moments(view, panel, init, subset)
    if len(y) == 0:
        return 0.0
    return float(stats.multivariate_normal(mu, S, allow_singular=False).logpdf(y))


def dense_state_posterior(view, panel, init):
    """Exact Gaussian posterior of x_0..x_T (stacked) given all observations."""
    members = list(view.members)
    pos = {m: k for k, m in enumerate(members)}
    beta = panel.beta[view.members] if view.beta is None else view.beta
    p, T = len(members), panel.T
    C, M = state_cov(view.a, view.Q, init.cov, T)
    mean_x = M[:, :p] @ init.mean
    H, off, rv, ys = [], [], [], []
    for j in range(panel.n_obs):
        r = int(panel.obs_region[j])
        if r not in pos:
            continue
        k = pos[r]
        row = np.zeros(len(mean_x))
        row[(int(panel.obs_month[j]) + 1) * p + k] = 1.0
        H.append(row)
        off.append(float(panel.u[j] @ beta[k]) if panel.H else 0.0)
        rv.append(view.R[k])
        ys.append(panel.y[j])
    H = np.array(H)
    S = H @ C @ H.T + np.diag(rv)
    K = C @ H.T @ np.linalg.inv(S)
    m = mean_x + K @ (np.array(ys) - H @ mean_x - np.array(off))
    P = C - K @ H @ C
    return m, 0.5 * (P + P.T)


def random_instance(rng, p_max=3, T_max=8, obs_max=3, H=1, p=None, T=None, zero_frac=0.3):
    """Random panel and cluster view over all regions of the panel."""
    p = p or int(rng.integers(1, p_max + 1))
    T = T or int(rng.integers(1, T_max + 1))
    regions, months, ys, us = [], [], [], []
    for t in range(T):
        for i in range(p):
            if rng.random() < zero_frac:
                continue
            for _ in range(int(rng.integers(1, obs_max + 1))):
                regions.append(i)
                months.append(t)
                ys.append(rng.normal(0, 1.5))
                us.append(rng.normal(0, 1, size=H))
    u = np.array(us).reshape(len(ys), H)
    beta = rng.normal(0, 0.5, size=(p, H))
    panel = build_panel(regions, months, ys, u, tuple(f"r{i}" for i in range(p)), T, beta=beta)
    view = ClusterView(
        np.arange(p),
        rng.uniform(-0.95, 0.95, p),
        rng.normal(0.3, 0.5, p),
        float(rng.uniform(0.1, 1.0)),
        rng.uniform(0.2, 1.5, p),
    )
    init = InitialStatePrior(rng.normal(0, 0.3, p), np.diag(rng.uniform(0.2, 1.0, p)))
    return view, panel, init
