"""Kalman filtering for clusters of AR(1) streams sharing a latent factor.

Within a cluster of ``p_k`` streams the latent state follows::

    x_t = diag(a) x_{t-1} + w_t,    w_t ~ N(0, lam lam^T + sigma0_sq I)

and every sale ``l`` in region ``i`` at month ``t`` is a noisy reading::

    y_{t,i,l} = x_{t,i} + u_l . beta_i + v,   v ~ N(0, R_i)

Two equivalent likelihood routes are provided. :func:`filter_naive` updates
on each individual sale. :func:`filter_suffstat` updates on per-cell means
with variance ``R_i / L_{t,i}`` and adds back the within-cell term so both
report the same log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DataError, DimensionError, InputError, NumericalError
from .ingest import StreamPanel

LOG_2PI = math.log(2.0 * math.pi)
A_CLIP = 0.9999


@dataclass(frozen=True)
class ClusterView:
    """Parameters of one cluster, aligned with ``members``.

    ``beta`` may be ``None`` to mean "whatever the panel's sufficient
    statistics were computed with".
    """

    members: np.ndarray
    a: np.ndarray
    lam: np.ndarray
    sigma0_sq: float
    R: np.ndarray
    beta: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "members", np.atleast_1d(np.asarray(self.members, dtype=np.int64)))
        for name in ("a", "lam", "R"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        n = len(self.members)
        if not (len(self.a) == len(self.lam) == len(self.R) == n):
            raise DimensionError("cluster parameter vectors must match the member count")
        if self.beta is not None:
            beta = np.asarray(self.beta, dtype=float)
            if beta.ndim == 1:
                beta = beta.reshape(n, -1)
            object.__setattr__(self, "beta", beta)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def Q(self) -> np.ndarray:
        return np.outer(self.lam, self.lam) + self.sigma0_sq * np.eye(self.size)

    def drop(self, local: int) -> "ClusterView":
        keep = np.delete(np.arange(self.size), local)
        return ClusterView(
            self.members[keep], self.a[keep], self.lam[keep], self.sigma0_sq, self.R[keep],
            None if self.beta is None else self.beta[keep],
        )

    @classmethod
    def from_state_arrays(cls, members, a, lam, sigma0_sq, R, beta=None) -> "ClusterView":
        members = np.asarray(members, dtype=np.int64)
        return cls(members, a[members], lam[members], float(sigma0_sq), R[members],
                   None if beta is None else beta[members])


@dataclass(frozen=True)
class InitialStatePrior:
    mean: np.ndarray
    cov: np.ndarray


def stationary_variance(a, sigma0_sq):
    """Idiosyncratic stationary variance ``sigma0_sq / (1 - a^2)`` with ``a^2`` clipped."""
    a2 = np.minimum(np.asarray(a, dtype=float) ** 2, A_CLIP)
    return sigma0_sq / (1.0 - a2)


def stationary_prior(view: ClusterView) -> InitialStatePrior:
    return InitialStatePrior(np.zeros(view.size), np.diag(stationary_variance(view.a, view.sigma0_sq)))


@dataclass
class FilterResult:
    loglik: float
    mu_filt: np.ndarray
    V_filt: np.ndarray
    mu_pred: np.ndarray
    V_pred: np.ndarray


def _check_inputs(view: ClusterView, panel: StreamPanel, init: InitialStatePrior):
    if panel.T < 1:
        raise DataError("panel has no time steps")
    if view.members.min(initial=0) < 0 or view.members.max(initial=0) >= panel.p:
        raise DataError("cluster member outside panel")
    vals = [view.a, view.lam, view.R, np.array([view.sigma0_sq]), init.mean, init.cov.ravel()]
    if view.beta is not None:
        vals.append(view.beta.ravel())
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise InputError("non-finite cluster parameters or initial prior")


def _chol(S, t):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(S + _kernels.JITTER * np.trace(S) * np.eye(len(S)))
    except np.linalg.LinAlgError:
        raise NumericalError("innovation covariance not positive definite after jitter", t=t) from None


def filter_naive(view: ClusterView, panel: StreamPanel, init: InitialStatePrior | None = None) -> FilterResult:
    """Kalman filter updating on every individual sale.

    At month ``t`` the observation vector stacks all sales of the cluster's
    members; the observation matrix picks each sale's region and the hedonic
    offset ``u . beta_region`` is subtracted.
    """
    init = stationary_prior(view) if init is None else init
    _check_inputs(view, panel, init)
    beta = panel.beta[view.members] if view.beta is None else view.beta
    if not (np.all(np.isfinite(panel.y)) and np.all(np.isfinite(panel.u))):
        raise InputError("non-finite observations")
    p = view.size
    pos = -np.ones(panel.p, dtype=np.int64)
    pos[view.members] = np.arange(p)
    a = view.a
    AA = np.outer(a, a)
    Q = view.Q
    mu, V = init.mean.astype(float).copy(), init.cov.astype(float).copy()
    T = panel.T
    mf, mp = np.empty((T, p)), np.empty((T, p))
    Vf, Vp = np.empty((T, p, p)), np.empty((T, p, p))
    ll = 0.0
    for t in range(T):
        mu_p = a * mu
        V_p = AA * V + Q
        lo, hi = panel.time_ptr[t], panel.time_ptr[t + 1]
        loc = pos[panel.obs_region[lo:hi]]
        sel = loc >= 0
        if sel.any():
            loc = loc[sel]
            y = panel.y[lo:hi][sel]
            if panel.H:
                y = y - np.einsum("nh,nh->n", panel.u[lo:hi][sel], beta[loc])
            PC = V_p[:, loc]                      # V_p C^T
            S = PC[loc, :] + np.diag(view.R[loc])  # C V_p C^T + R_t
            Lc = _chol(S, t)
            e = np.linalg.solve(Lc, y - mu_p[loc])
            G = np.linalg.solve(Lc, PC.T)         # Lc^{-1} C V_p
            ll += -0.5 * (len(y) * LOG_2PI + 2.0 * np.log(np.diag(Lc)).sum() + e @ e)
            mu = mu_p + G.T @ e
            V = V_p - G.T @ G
            V = 0.5 * (V + V.T)
        else:
            mu, V = mu_p, V_p
        mf[t], Vf[t], mp[t], Vp[t] = mu, V, mu_p, V_p
    return FilterResult(float(ll), mf, Vf, mp, Vp)


def suffstat_correction(panel: StreamPanel, members, R) -> float:
    """Within-cell log-density left out when sales are replaced by cell means.

    For a cell with ``L`` sales of adjusted value ``psi`` the term is
    ``-0.5 * [(L-1) log(2 pi R) + (sum psi^2 - L psi_bar^2) / R + log L]``.
    """
    members = np.asarray(members, dtype=np.int64)
    L = panel.counts[:, members]
    R = np.broadcast_to(np.asarray(R, dtype=float), (len(members),))
    obs = L > 0
    Lf = L.astype(float)
    ss = panel.psi_sq[:, members] - Lf * panel.psi_bar[:, members] ** 2
    term = (Lf - 1.0) * (LOG_2PI + np.log(R)) + ss / R + np.log(np.where(obs, Lf, 1.0))
    return float(-0.5 * term[obs].sum())


def _suff_arrays(view: ClusterView, panel: StreamPanel):
    if view.beta is not None and panel.H and not np.allclose(view.beta, panel.beta[view.members], rtol=0, atol=0):
        raise DataError("panel sufficient statistics were computed with different hedonic coefficients")
    ybar = np.ascontiguousarray(panel.psi_bar[:, view.members])
    L = np.ascontiguousarray(panel.counts[:, view.members], dtype=float)
    return ybar, L


def _filter_suffstat_numpy(view, ybar, L, init):
    a = view.a
    AA = np.outer(a, a)
    Q = view.Q
    T, p = ybar.shape
    mu, V = init.mean.astype(float).copy(), init.cov.astype(float).copy()
    mf, mp = np.empty((T, p)), np.empty((T, p))
    Vf, Vp = np.empty((T, p, p)), np.empty((T, p, p))
    ll = 0.0
    for t in range(T):
        mu_p = a * mu
        V_p = AA * V + Q
        obs = np.flatnonzero(L[t] > 0)
        if len(obs) == p:
            # every member observed: identity observation matrix
            S = V_p + np.diag(view.R / L[t])
            Lc = _chol(S, t)
            e = np.linalg.solve(Lc, ybar[t] - mu_p)
            G = np.linalg.solve(Lc, V_p)
        elif len(obs):
            S = V_p[np.ix_(obs, obs)] + np.diag(view.R[obs] / L[t, obs])
            Lc = _chol(S, t)
            e = np.linalg.solve(Lc, ybar[t, obs] - mu_p[obs])
            G = np.linalg.solve(Lc, V_p[obs, :])
        else:
            mu, V = mu_p, V_p
            mf[t], Vf[t], mp[t], Vp[t] = mu, V, mu_p, V_p
            continue
        ll += -0.5 * (len(obs) * LOG_2PI + 2.0 * np.log(np.diag(Lc)).sum() + e @ e)
        mu = mu_p + G.T @ e
        V = V_p - G.T @ G
        V = 0.5 * (V + V.T)
        mf[t], Vf[t], mp[t], Vp[t] = mu, V, mu_p, V_p
    return ll, mf, Vf, mp, Vp


def filter_suffstat(view: ClusterView, panel: StreamPanel, init: InitialStatePrior | None = None,
                    backend: str = "numba", correct: bool = True) -> FilterResult:
    """Kalman filter driven by per-cell means ``psi_bar`` and counts ``L``.

    With ``correct=True`` the within-cell term of :func:`suffstat_correction`
    is added, making ``loglik`` equal to :func:`filter_naive`'s.
    """
    init = stationary_prior(view) if init is None else init
    _check_inputs(view, panel, init)
    ybar, L = _suff_arrays(view, panel)
    if backend == "numba":
        status, ll, mf, Vf, mp, Vp = _kernels.suffstat_filter(
            view.a, view.Q, view.R, ybar, L, init.mean.astype(float), init.cov.astype(float))
        if status != 0:
            raise NumericalError("innovation covariance not positive definite after jitter", t=-status - 1)
    elif backend == "numpy":
        ll, mf, Vf, mp, Vp = _filter_suffstat_numpy(view, ybar, L, init)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    if correct:
        ll += suffstat_correction(panel, view.members, view.R)
    return FilterResult(float(ll), mf, Vf, mp, Vp)


def cluster_loglik(view: ClusterView, panel: StreamPanel, init: InitialStatePrior | None = None,
                   correct: bool = True) -> float:
    """Log-likelihood only, via the compiled sufficient-statistic recursion."""
    init = stationary_prior(view) if init is None else init
    ybar, L = _suff_arrays(view, panel)
    status, ll = _kernels.suffstat_loglik(view.a, view.Q, view.R, ybar, L,
                                          init.mean.astype(float), init.cov.astype(float))
    if status != 0:
        raise NumericalError("innovation covariance not positive definite after jitter", t=-status - 1)
    if correct:
        ll += suffstat_correction(panel, view.members, view.R)
    return float(ll)


def stream_conditional_loglik(i: int, k, view_with_i: ClusterView, panel: StreamPanel,
                              init: InitialStatePrior | None = None) -> float:
    """``log p(y_i | y_{-i})`` for region ``i`` inside cluster ``k``.

    Computed exactly as the joint cluster log-likelihood minus that of the
    cluster without ``i``. ``k`` only labels the cluster for error messages.
    """
    hits = np.flatnonzero(view_with_i.members == i)
    if len(hits) != 1:
        raise DataError(f"region {i} is not a member of cluster {k}")
    local = int(hits[0])
    joint = cluster_loglik(view_with_i, panel, init)
    if view_with_i.size == 1:
        return joint
    rest = view_with_i.drop(local)
    rest_init = None
    if init is not None:
        keep = np.delete(np.arange(view_with_i.size), local)
        rest_init = InitialStatePrior(init.mean[keep], init.cov[np.ix_(keep, keep)])
    return joint - cluster_loglik(rest, panel, rest_init)


def new_cluster_loglik(i: int, a_i: float, lambda_new: float, sigma0_sq: float, R_i: float,
                       beta_i, panel: StreamPanel, init: InitialStatePrior | None = None) -> float:
    """Singleton-cluster likelihood of region ``i`` with innovation variance ``lambda_new^2 + sigma0_sq``."""
    view = ClusterView([i], [a_i], [lambda_new], sigma0_sq, [R_i], None if beta_i is None else [beta_i])
    return cluster_loglik(view, panel, init)


def ffbs(view: ClusterView, panel: StreamPanel, init: InitialStatePrior | None = None,
         rng: np.random.Generator | None = None) -> np.ndarray:
    """Joint draw of the cluster's latent path.

    Returns an array of shape ``(T + 1, p_k)``: row 0 is the initial state and
    row ``t + 1`` is month ``t``.
    """
    if rng is None:
        raise ValueError("ffbs needs an explicit generator")
    init = stationary_prior(view) if init is None else init
    res = filter_suffstat(view, panel, init, correct=False)
    z = rng.standard_normal((panel.T + 1, view.size))
    status, x = _kernels.backward_sample(view.a, init.mean.astype(float), init.cov.astype(float),
                                         res.mu_filt, res.V_filt, res.mu_pred, res.V_pred, z)
    if status != 0:
        raise NumericalError("predictive covariance singular in backward pass", t=-status - 1)
    return x


def rts_smoother(view: ClusterView, res: FilterResult, init: InitialStatePrior):
    """Rauch-Tung-Striebel smoothed moments including the initial state.

    Returns ``(mean (T+1,p), cov (T+1,p,p), lag_cov (T,p,p))`` where
    ``lag_cov[t] = Cov(x_{t+1}, x_t | y)`` in full-time indexing.
    """
    T, p = res.mu_filt.shape
    mf = np.concatenate([init.mean[None], res.mu_filt])
    Vf = np.concatenate([init.cov[None], res.V_filt])
    ms, Vs = mf.copy(), Vf.copy()
    lag = np.empty((T, p, p))
    A = np.diag(view.a)
    for t in range(T - 1, -1, -1):
        Vp = res.V_pred[t]
        J = np.linalg.solve(Vp, A @ Vf[t]).T
        ms[t] = mf[t] + J @ (ms[t + 1] - res.mu_pred[t])
        Vs[t] = Vf[t] + J @ (Vs[t + 1] - Vp) @ J.T
        Vs[t] = 0.5 * (Vs[t] + Vs[t].T)
        lag[t] = Vs[t + 1] @ J.T
    return ms, Vs, lag
