"""Collapsed Gibbs sampler for the DP-clustered latent factor model.

One sweep runs, in order:

1. cluster labels ``z`` with latent states and factors integrated out,
2. a joint draw of latent states ``x`` (FFBS per cluster) and factors ``eta``,
3. the per-region parameters ``lam, a, R, beta`` and the shared ``sigma0_sq``,
4. the hierarchical hyperparameters,
5. the DP concentration ``alpha``.

Labels are 0-based and contiguous after every sweep. Latent states are
stored with the initial state included, ``x`` has shape ``(T + 1, p)`` with
row 0 holding ``x_0``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.special import logsumexp

from .errors import CheckpointError, InvariantError, NumericalError
from .ingest import StreamPanel, refresh_suffstats
from .ssm import A_CLIP, ClusterView, InitialStatePrior, cluster_loglik, ffbs

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------


@dataclass
class HyperParams:
    """Sampled hyperparameters plus the fixed constants of their priors."""

    mu_lambda: float = 0.0
    sigma_lambda_sq: float = 1.0
    mu_a: float = 0.0
    sigma_a_sq: float = 1.0
    mu_h: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma_h_sq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # fixed constants
    alpha_eps0: float = 0.5
    beta_eps0: float = 1.0
    alpha_R0: float = 3.0
    beta_R0: float = 1.0
    mu_lambda0: float = 0.0
    sigma_lambda0_sq: float = 100.0
    mu_a0: float = 0.0
    sigma_a0_sq: float = 100.0
    mu_h0: float = 0.0
    sigma_h0_sq: float = 100.0
    alpha_lambda0: float = 2.0
    beta_lambda0: float = 1.0
    alpha_a0: float = 2.0
    beta_a0: float = 1.0
    alpha_h0: float = 2.0
    beta_h0: float = 1.0
    alpha_alpha: float = 1.0
    beta_alpha: float = 1.0

    CONSTANTS = (
        "alpha_eps0", "beta_eps0", "alpha_R0", "beta_R0", "mu_lambda0", "sigma_lambda0_sq",
        "mu_a0", "sigma_a0_sq", "mu_h0", "sigma_h0_sq", "alpha_lambda0", "beta_lambda0",
        "alpha_a0", "beta_a0", "alpha_h0", "beta_h0", "alpha_alpha", "beta_alpha",
    )

    def __post_init__(self):
        self.mu_h = np.atleast_1d(np.asarray(self.mu_h, dtype=float))
        self.sigma_h_sq = np.atleast_1d(np.asarray(self.sigma_h_sq, dtype=float))

    def validate(self):
        pos = ["sigma_lambda_sq", "sigma_a_sq", "alpha_eps0", "beta_eps0", "alpha_R0", "beta_R0",
               "sigma_lambda0_sq", "sigma_a0_sq", "sigma_h0_sq", "alpha_lambda0", "beta_lambda0",
               "alpha_a0", "beta_a0", "alpha_h0", "beta_h0", "alpha_alpha", "beta_alpha"]
        bad = [n for n in pos if not getattr(self, n) > 0]
        if np.any(self.sigma_h_sq <= 0):
            bad.append("sigma_h_sq")
        if bad:
            raise InvariantError(f"non-positive variance or IG constant: {', '.join(bad)}")

    def constants(self) -> dict:
        return {n: getattr(self, n) for n in self.CONSTANTS}

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["mu_h"] = self.mu_h.tolist()
        d["sigma_h_sq"] = self.sigma_h_sq.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "HyperParams":
        return cls(**d)

    @classmethod
    def with_constants(cls, H: int, **overrides) -> "HyperParams":
        """Hyperparameters started at their top-level prior means."""
        unknown = set(overrides) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown hyperparameter(s): {sorted(unknown)}")
        hp = cls(**overrides)
        if "mu_h" not in overrides:
            hp.mu_h = np.full(H, hp.mu_h0)
        if "sigma_h_sq" not in overrides:
            hp.sigma_h_sq = np.full(H, 1.0)
        return hp


@dataclass
class ModelState:
    z: np.ndarray          # (p,) labels 0..K-1
    x: np.ndarray          # (T+1, p), row 0 is the initial state
    eta: np.ndarray        # (T, K)
    lam: np.ndarray        # (p,) active loadings lambda_{i, z_i}
    a: np.ndarray          # (p,)
    R: np.ndarray          # (p,)
    beta: np.ndarray       # (p, H)
    sigma0_sq: float
    hyper: HyperParams
    alpha: float

    @property
    def p(self) -> int:
        return len(self.z)

    @property
    def T(self) -> int:
        return self.x.shape[0] - 1

    @property
    def K(self) -> int:
        return int(self.z.max()) + 1 if len(self.z) else 0

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.z == k)

    def clusters(self) -> list[np.ndarray]:
        return [self.members(k) for k in range(self.K)]

    def view(self, k: int) -> ClusterView:
        return ClusterView.from_state_arrays(self.members(k), self.a, self.lam, self.sigma0_sq, self.R)

    def check(self) -> None:
        """Raise :class:`InvariantError` if any structural invariant fails."""
        p = self.p
        if self.K and set(np.unique(self.z).tolist()) != set(range(self.K)):
            raise InvariantError("cluster labels are not contiguous")
        if self.x.shape[1] != p or self.eta.shape != (self.T, self.K):
            raise InvariantError("latent arrays do not match p, T, K")
        for name in ("lam", "a", "R"):
            if getattr(self, name).shape != (p,):
                raise InvariantError(f"{name} has wrong shape")
        if not self.sigma0_sq > 0 or not np.all(self.R > 0):
            raise InvariantError("variances must be positive")
        if not self.alpha > 0:
            raise InvariantError("concentration must be positive")
        arrays = [self.x, self.eta, self.lam, self.a, self.R, self.beta]
        if not all(np.all(np.isfinite(v)) for v in arrays) or not math.isfinite(self.sigma0_sq):
            raise InvariantError("non-finite entries in state")
        self.hyper.validate()

    def to_dict(self) -> dict:
        return {
            "z": self.z.tolist(), "x": self.x.tolist(), "eta": self.eta.tolist(),
            "lam": self.lam.tolist(), "a": self.a.tolist(), "R": self.R.tolist(),
            "beta": self.beta.tolist(), "sigma0_sq": self.sigma0_sq,
            "hyper": self.hyper.to_dict(), "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d) -> "ModelState":
        T1 = len(d["x"])
        p = len(d["z"])
        K = max(d["z"]) + 1 if p else 0
        return cls(
            z=np.asarray(d["z"], dtype=np.int64),
            x=np.asarray(d["x"], dtype=float).reshape(T1, p),
            eta=np.asarray(d["eta"], dtype=float).reshape(T1 - 1, K),
            lam=np.asarray(d["lam"], dtype=float),
            a=np.asarray(d["a"], dtype=float),
            R=np.asarray(d["R"], dtype=float),
            beta=np.asarray(d["beta"], dtype=float).reshape(p, -1),
            sigma0_sq=float(d["sigma0_sq"]),
            hyper=HyperParams.from_dict(d["hyper"]),
            alpha=float(d["alpha"]),
        )


@dataclass(frozen=True)
class SweepOptions:
    """Switches for a sweep.

    ``init_prior`` selects the law of ``x_0``: ``"stationary"`` uses
    ``N(0, sigma0_sq / (1 - min(a^2, 0.9999)))`` per region, ``"fixed"`` uses
    ``N(0, init_var)`` independent of the parameters. Disabling ``update_z``
    freezes the partition (used for the no-clustering comparison).
    """

    init_prior: str = "stationary"
    init_var: float = 1.0
    update_z: bool = True
    update_hyper: bool = True
    update_alpha: bool = True
    update_sigma0: bool = True


DEFAULT_OPTIONS = SweepOptions()


def init_variance(a, sigma0_sq, opts: SweepOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Per-region prior variance of ``x_0``."""
    a = np.asarray(a, dtype=float)
    if opts.init_prior == "stationary":
        return sigma0_sq / (1.0 - np.minimum(a * a, A_CLIP))
    if opts.init_prior == "fixed":
        return np.full(a.shape, float(opts.init_var))
    raise ValueError(f"unknown initial prior {opts.init_prior!r}")


def _init(a, sigma0_sq, opts) -> InitialStatePrior:
    v = init_variance(a, sigma0_sq, opts)
    return InitialStatePrior(np.zeros(len(v)), np.diag(v))


def relabel(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map labels to 0..K-1 in order of first appearance.

    Returns ``(new_z, old_of_new)`` where ``old_of_new[k]`` is the original
    label now called ``k``.
    """
    _, first, inv = np.unique(z, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[inv].astype(np.int64), np.unique(z)[order]


def _invgamma(rng, shape, rate):
    return rate / rng.gamma(shape)


# ---------------------------------------------------------------------------
# Step 1: cluster assignments
# ---------------------------------------------------------------------------


def crp_log_prior(counts, alpha) -> np.ndarray:
    """Unnormalized log CRP weights for joining each cluster or opening a new one."""
    counts = np.asarray(counts, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(np.r_[counts, alpha])


def sample_z(state: ModelState, panel: StreamPanel, rng: np.random.Generator,
             opts: SweepOptions = DEFAULT_OPTIONS, alpha: float | None = None):
    """Reassign every region given all parameters, with ``x`` and ``eta`` integrated out.

    Regions are visited in a random order. Candidate loadings for clusters a
    region does not currently occupy are fresh prior draws; when a region was
    alone its current loading serves as the new-cluster candidate. Returns
    ``(z, lam)`` with contiguous labels.
    """
    alpha = state.alpha if alpha is None else alpha
    hp = state.hyper
    sd_lam = math.sqrt(hp.sigma_lambda_sq)
    z = state.z.copy()
    lam = state.lam.copy()
    a, R, s2 = state.a, state.R, state.sigma0_sq
    v0 = init_variance(a, s2, opts)

    def loglik(members):
        members = np.asarray(members, dtype=np.int64)
        view = ClusterView(members, a[members], lam[members], s2, R[members])
        init = InitialStatePrior(np.zeros(len(members)), np.diag(v0[members]))
        return cluster_loglik(view, panel, init, correct=False)

    z_, _ = relabel(z)
    z = z_
    cache: dict[int, float] = {}
    for i in rng.permutation(state.p):
        k_old = int(z[i])
        singleton = np.count_nonzero(z == k_old) == 1
        z[i] = -1
        if singleton:
            z[z > k_old] -= 1
            cache = {(k - 1 if k > k_old else k): v for k, v in cache.items() if k != k_old}
        else:
            cache.pop(k_old, None)
        K = int(z.max()) + 1 if np.any(z >= 0) else 0
        logw = np.empty(K + 1)
        cand = np.empty(K + 1)
        with_ll = np.empty(K)
        counts = np.bincount(z[z >= 0], minlength=K)
        prior = crp_log_prior(counts, alpha)
        for k in range(K):
            mem = np.flatnonzero(z == k)
            if k not in cache:
                cache[k] = loglik(mem)
            cand[k] = lam[i] if (k == k_old and not singleton) else rng.normal(hp.mu_lambda, sd_lam)
            keep = lam[i]
            lam[i] = cand[k]
            with_ll[k] = loglik(np.sort(np.r_[mem, i]))
            lam[i] = keep
            logw[k] = prior[k] + with_ll[k] - cache[k]
        cand[K] = lam[i] if singleton else rng.normal(hp.mu_lambda, sd_lam)
        keep = lam[i]
        lam[i] = cand[K]
        new_ll = loglik([i])
        lam[i] = keep
        logw[K] = prior[K] + new_ll
        norm = logsumexp(logw)
        if not np.isfinite(norm):
            raise NumericalError(
                f"all assignment weights for region {i} are -inf or nan",
                context={"region": int(i), "log_weights": logw.tolist(), "alpha": alpha},
            )
        probs = np.exp(logw - norm)
        k_new = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
        k_new = min(k_new, K)
        z[i] = k_new
        lam[i] = cand[k_new]
        cache[k_new] = new_ll if k_new == K else with_ll[k_new]
    z, _ = relabel(z)
    return z, lam


# ---------------------------------------------------------------------------
# Step 2: latent states and factors
# ---------------------------------------------------------------------------


def sample_eta(x, z, lam, a, sigma0_sq, K, rng):
    """Factor draw given states: one scalar Gaussian per (t, k)."""
    eps = x[1:] - a * x[:-1]
    T = eps.shape[0]
    prec = 1.0 + np.bincount(z, weights=lam * lam, minlength=K) / sigma0_sq
    V = 1.0 / prec
    # sum_i in k of lam_i eps_{t,i}
    proj = np.zeros((T, K))
    np.add.at(proj.T, z, (lam[:, None] * eps.T))
    mean = V * proj / sigma0_sq
    return mean + np.sqrt(V) * rng.standard_normal((T, K))


def sample_x_eta(state: ModelState, panel: StreamPanel, rng: np.random.Generator,
                 opts: SweepOptions = DEFAULT_OPTIONS):
    """FFBS per cluster with factors integrated out, then factors given states."""
    x = np.empty_like(state.x)
    for k in range(state.K):
        view = state.view(k)
        init = _init(view.a, state.sigma0_sq, opts)
        x[:, view.members] = ffbs(view, panel, init, rng)
    eta = sample_eta(x, state.z, state.lam, state.a, state.sigma0_sq, state.K, rng)
    return x, eta


# ---------------------------------------------------------------------------
# Step 3: parameters
# ---------------------------------------------------------------------------


def _factor_term(state):
    return state.lam * state.eta[:, state.z]  # (T, p)


def lambda_conditional(state: ModelState):
    """Mean and variance of each active loading given states and factors."""
    hp, s2 = state.hyper, state.sigma0_sq
    eps = state.x[1:] - state.a * state.x[:-1]
    e = state.eta[:, state.z]
    v = 1.0 / (1.0 / hp.sigma_lambda_sq + (e * e).sum(0) / s2)
    m = v * (hp.mu_lambda / hp.sigma_lambda_sq + (eps * e).sum(0) / s2)
    return m, v


def sample_lambda(state: ModelState, rng: np.random.Generator) -> np.ndarray:
    m, v = lambda_conditional(state)
    return m + np.sqrt(v) * rng.standard_normal(state.p)


def a_conditional(state: ModelState):
    """Conjugate mean and variance of ``a_i`` from the transitions ``t = 1..T``."""
    hp, s2 = state.hyper, state.sigma0_sq
    prev = state.x[:-1]
    e = state.x[1:] - _factor_term(state)
    V = 1.0 / (1.0 / hp.sigma_a_sq + (prev * prev).sum(0) / s2)
    m = V * (hp.mu_a / hp.sigma_a_sq + (prev * e).sum(0) / s2)
    return m, V


def sample_a(state: ModelState, rng: np.random.Generator, opts: SweepOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Draw ``a`` from its conjugate transition conditional.

    Under the stationary initial prior ``x_0`` also depends on ``a``; the
    conjugate draw is then used as an independence proposal and accepted
    with the ratio of the ``x_0`` densities.
    """
    m, V = a_conditional(state)
    prop = m + np.sqrt(V) * rng.standard_normal(state.p)
    if opts.init_prior != "stationary":
        return prop
    x0 = state.x[0]
    v_old = init_variance(state.a, state.sigma0_sq, opts)
    v_new = init_variance(prop, state.sigma0_sq, opts)
    log_ratio = -0.5 * (np.log(v_new / v_old) + x0 * x0 * (1.0 / v_new - 1.0 / v_old))
    accept = np.log(rng.random(state.p)) < log_ratio
    return np.where(accept, prop, state.a)


def residuals(state: ModelState, panel: StreamPanel) -> np.ndarray:
    """Per-sale ``y - x_{t,i} - u . beta_i``."""
    r = panel.y - state.x[panel.obs_month + 1, panel.obs_region]
    if panel.H:
        r = r - np.einsum("nh,nh->n", panel.u, state.beta[panel.obs_region])
    return r


def R_conditional(state: ModelState, panel: StreamPanel):
    hp = state.hyper
    r = residuals(state, panel)
    m = np.bincount(panel.obs_region, minlength=state.p)
    ss = np.bincount(panel.obs_region, weights=r * r, minlength=state.p)
    return hp.alpha_R0 + 0.5 * m, hp.beta_R0 + 0.5 * ss


def sample_R(state: ModelState, panel: StreamPanel, rng: np.random.Generator) -> np.ndarray:
    shape, rate = R_conditional(state, panel)
    return _invgamma(rng, shape, rate)


def sample_beta(state: ModelState, panel: StreamPanel, rng: np.random.Generator) -> np.ndarray:
    """Coordinate-wise Gaussian draws of ``beta_{i,h}``, ``h`` in order."""
    H = panel.H
    beta = state.beta.copy()
    if H == 0:
        return beta
    hp = state.hyper
    base = panel.y - state.x[panel.obs_month + 1, panel.obs_region]
    order = np.argsort(panel.obs_region, kind="stable")
    bounds = np.searchsorted(panel.obs_region[order], np.arange(state.p + 1))
    for i in range(state.p):
        idx = order[bounds[i]:bounds[i + 1]]
        u = panel.u[idx]
        b = base[idx]
        for h in range(H):
            partial = b - u @ beta[i] + u[:, h] * beta[i, h]
            v = 1.0 / (1.0 / hp.sigma_h_sq[h] + (u[:, h] ** 2).sum() / state.R[i])
            m = v * (hp.mu_h[h] / hp.sigma_h_sq[h] + (u[:, h] * partial).sum() / state.R[i])
            beta[i, h] = m + math.sqrt(v) * rng.standard_normal()
    return beta


def sigma0_conditional(state: ModelState, opts: SweepOptions = DEFAULT_OPTIONS):
    """Inverse-gamma shape and rate for ``sigma0_sq``."""
    hp = state.hyper
    e = state.x[1:] - state.a * state.x[:-1] - _factor_term(state)
    T, p = e.shape
    shape = hp.alpha_eps0 + 0.5 * T * p
    rate = hp.beta_eps0 + 0.5 * float((e * e).sum())
    if opts.init_prior == "stationary":
        shape += 0.5 * p
        rate += 0.5 * float((state.x[0] ** 2 * (1.0 - np.minimum(state.a ** 2, A_CLIP))).sum())
    return shape, rate


def sample_sigma0(state: ModelState, rng: np.random.Generator, opts: SweepOptions = DEFAULT_OPTIONS) -> float:
    shape, rate = sigma0_conditional(state, opts)
    return float(_invgamma(rng, shape, rate))


# ---------------------------------------------------------------------------
# Step 4: hyperparameters
# ---------------------------------------------------------------------------


def normal_mean_conditional(values, var, mu0, var0):
    values = np.asarray(values, dtype=float)
    v = 1.0 / (1.0 / var0 + len(values) / var)
    return v * (mu0 / var0 + values.sum() / var), v


def ig_scale_conditional(values, mu, shape0, rate0):
    values = np.asarray(values, dtype=float)
    return shape0 + 0.5 * len(values), rate0 + 0.5 * float(((values - mu) ** 2).sum())


def sample_hyperparams(state: ModelState, rng: np.random.Generator) -> HyperParams:
    """Mean then variance for each of the loading, AR and hedonic priors."""
    hp = replace(state.hyper, mu_h=state.hyper.mu_h.copy(), sigma_h_sq=state.hyper.sigma_h_sq.copy())

    def pair(values, mu, var, mu0, var0, shape0, rate0):
        m, v = normal_mean_conditional(values, var, mu0, var0)
        mu = m + math.sqrt(v) * rng.standard_normal()
        shape, rate = ig_scale_conditional(values, mu, shape0, rate0)
        return mu, float(_invgamma(rng, shape, rate))

    hp.mu_lambda, hp.sigma_lambda_sq = pair(state.lam, hp.mu_lambda, hp.sigma_lambda_sq, hp.mu_lambda0,
                                            hp.sigma_lambda0_sq, hp.alpha_lambda0, hp.beta_lambda0)
    hp.mu_a, hp.sigma_a_sq = pair(state.a, hp.mu_a, hp.sigma_a_sq, hp.mu_a0, hp.sigma_a0_sq,
                                  hp.alpha_a0, hp.beta_a0)
    for h in range(state.beta.shape[1]):
        hp.mu_h[h], hp.sigma_h_sq[h] = pair(state.beta[:, h], hp.mu_h[h], hp.sigma_h_sq[h], hp.mu_h0,
                                            hp.sigma_h0_sq, hp.alpha_h0, hp.beta_h0)
    return hp


# ---------------------------------------------------------------------------
# Step 5: concentration
# ---------------------------------------------------------------------------


def alpha_mixture_weight(alpha_alpha, beta_alpha, K, n, kappa) -> float:
    """Weight ``pi`` of the ``Gamma(alpha_alpha + K, .)`` component."""
    odds = (alpha_alpha + K - 1) / (n * (beta_alpha - math.log(kappa)))
    return odds / (1.0 + odds)


def sample_alpha_given(alpha, K, n, alpha_alpha, beta_alpha, rng) -> float:
    kappa = rng.beta(alpha + 1.0, n)
    pi = alpha_mixture_weight(alpha_alpha, beta_alpha, K, n, kappa)
    rate = beta_alpha - math.log(kappa)
    shape = alpha_alpha + K if rng.random() < pi else alpha_alpha + K - 1
    return float(rng.gamma(shape, 1.0 / rate))


def sample_alpha(state: ModelState, rng: np.random.Generator) -> float:
    hp = state.hyper
    return sample_alpha_given(state.alpha, state.K, state.p, hp.alpha_alpha, hp.beta_alpha, rng)


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


def sync_panel(panel: StreamPanel, beta) -> StreamPanel:
    """Panel whose sufficient statistics match ``beta``."""
    if panel.H == 0 or np.array_equal(panel.beta, beta):
        return panel
    return refresh_suffstats(panel, beta)


def update_params(state: ModelState, panel: StreamPanel, rng, opts: SweepOptions = DEFAULT_OPTIONS,
                  shared: bool = True) -> StreamPanel:
    """Loadings, AR coefficients, noise, hedonics and (if ``shared``) ``sigma0_sq``, in place."""
    state.lam = sample_lambda(state, rng)
    state.a = sample_a(state, rng, opts)
    state.R = sample_R(state, panel, rng)
    state.beta = sample_beta(state, panel, rng)
    panel = sync_panel(panel, state.beta)
    if shared:
        state.sigma0_sq = sample_sigma0(state, rng, opts)
    return panel


def gibbs_sweep(state: ModelState, panel: StreamPanel, rng: np.random.Generator,
                opts: SweepOptions = DEFAULT_OPTIONS) -> ModelState:
    """One full sweep; returns a new state and leaves ``state`` untouched.

    Any failure inside the sweep propagates and the caller still holds the
    pre-sweep state.
    """
    new = state.copy()
    panel = sync_panel(panel, new.beta)
    if opts.update_z:
        new.z, new.lam = sample_z(new, panel, rng, opts)
        new.eta = np.zeros((new.T, new.K))
    new.x, new.eta = sample_x_eta(new, panel, rng, opts)
    update_params(new, panel, rng, opts, shared=opts.update_sigma0)
    if opts.update_hyper:
        new.hyper = sample_hyperparams(new, rng)
    if opts.update_alpha:
        new.alpha = sample_alpha(new, rng)
    new.check()
    return new


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def prior_state(p: int, T: int, H: int, hyper: HyperParams, rng: np.random.Generator,
                opts: SweepOptions = DEFAULT_OPTIONS, draw_hyper: bool = True) -> ModelState:
    """Joint draw of every unknown from the prior (CRP partition included)."""
    hp = replace(hyper, mu_h=hyper.mu_h.copy(), sigma_h_sq=hyper.sigma_h_sq.copy())
    if draw_hyper:
        hp.mu_lambda = rng.normal(hp.mu_lambda0, math.sqrt(hp.sigma_lambda0_sq))
        hp.sigma_lambda_sq = float(_invgamma(rng, hp.alpha_lambda0, hp.beta_lambda0))
        hp.mu_a = rng.normal(hp.mu_a0, math.sqrt(hp.sigma_a0_sq))
        hp.sigma_a_sq = float(_invgamma(rng, hp.alpha_a0, hp.beta_a0))
        hp.mu_h = rng.normal(hp.mu_h0, math.sqrt(hp.sigma_h0_sq), H)
        hp.sigma_h_sq = _invgamma(rng, np.full(H, hp.alpha_h0), hp.beta_h0)
    alpha = float(rng.gamma(hp.alpha_alpha, 1.0 / hp.beta_alpha))
    z = np.zeros(p, dtype=np.int64)
    for i in range(1, p):
        counts = np.bincount(z[:i])
        w = np.r_[counts, alpha]
        z[i] = rng.choice(len(w), p=w / w.sum())
    K = int(z.max()) + 1
    lam = rng.normal(hp.mu_lambda, math.sqrt(hp.sigma_lambda_sq), p)
    a = rng.normal(hp.mu_a, math.sqrt(hp.sigma_a_sq), p)
    R = _invgamma(rng, np.full(p, hp.alpha_R0), hp.beta_R0)
    beta = rng.normal(hp.mu_h, np.sqrt(hp.sigma_h_sq), (p, H))
    s2 = float(_invgamma(rng, hp.alpha_eps0, hp.beta_eps0))
    eta = rng.standard_normal((T, K))
    x = np.empty((T + 1, p))
    x[0] = rng.normal(0.0, np.sqrt(init_variance(a, s2, opts)))
    for t in range(T):
        x[t + 1] = a * x[t] + lam * eta[t, z] + math.sqrt(s2) * rng.standard_normal(p)
    return ModelState(z, x, eta, lam, a, R, beta, s2, hp, alpha)


def init_state(panel: StreamPanel, rng: np.random.Generator, hyper: HyperParams | None = None,
               partition: str = "singletons", opts: SweepOptions = DEFAULT_OPTIONS) -> ModelState:
    """Data-scaled starting point for fitting.

    ``partition`` is ``"singletons"``, ``"one"`` or ``"random"`` (a CRP draw
    with the starting concentration). Variances start from the spread of the
    observations; states come from one FFBS draw.
    """
    p, T, H = panel.p, panel.T, panel.H
    hp = hyper if hyper is not None else HyperParams.with_constants(H)
    if len(hp.mu_h) != H:
        hp = replace(hp, mu_h=np.full(H, hp.mu_h0), sigma_h_sq=np.ones(H))
    y_var = float(np.var(panel.y)) if panel.n_obs > 1 else 1.0
    y_var = y_var if y_var > 0 else 1.0
    if partition == "singletons":
        z = np.arange(p, dtype=np.int64)
    elif partition == "one":
        z = np.zeros(p, dtype=np.int64)
    elif partition == "random":
        z = prior_state(p, 1, H, hp, rng, opts, draw_hyper=False).z
    else:
        raise ValueError(f"unknown initial partition {partition!r}")
    K = int(z.max()) + 1
    state = ModelState(
        z=z,
        x=np.zeros((T + 1, p)),
        eta=np.zeros((T, K)),
        lam=np.zeros(p),
        a=np.full(p, 0.5),
        R=np.full(p, 0.5 * y_var),
        beta=np.zeros((p, H)),
        sigma0_sq=0.1 * y_var,
        hyper=replace(hp, sigma_lambda_sq=max(hp.sigma_lambda_sq, 0.1 * y_var)),
        alpha=1.0,
    )
    panel = sync_panel(panel, state.beta)
    state.x, state.eta = sample_x_eta(state, panel, rng, opts)
    return state


# ---------------------------------------------------------------------------
# Chains and checkpoints
# ---------------------------------------------------------------------------


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _rng_state_to_json(state):
    return json.loads(json.dumps(state, default=_json_default))


CHECKPOINT_FORMAT = "hyperlocal-checkpoint-1"


def write_checkpoint(path, state: ModelState, rng: np.random.Generator, sweeps: int, cfg_hash: str,
                     opts: SweepOptions = DEFAULT_OPTIONS, extra: dict | None = None) -> None:
    """Self-describing JSON: state, exact generator position and config hash."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": cfg_hash,
        "sweeps": int(sweeps),
        "options": asdict(opts),
        "rng": _rng_state_to_json(rng.bit_generator.state),
        "state": state.to_dict(),
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, default=_json_default)
    os.replace(tmp, path)


def read_checkpoint(path, cfg_hash: str | None = None) -> dict:
    """Load a checkpoint; refuses when unreadable or written under another config.

    Returns a dict with ``state``, ``rng``, ``sweeps``, ``options`` and ``extra``.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("unrecognized checkpoint format")
        state = ModelState.from_dict(doc["state"])
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = doc["rng"]
        opts = SweepOptions(**doc["options"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if cfg_hash is not None and doc["config_hash"] != cfg_hash:
        raise CheckpointError(
            f"checkpoint config hash {doc['config_hash']} does not match current config {cfg_hash}; "
            "refusing to resume")
    return {"state": state, "rng": rng, "sweeps": int(doc["sweeps"]), "options": opts,
            "config_hash": doc["config_hash"], "extra": doc.get("extra", {})}


@dataclass
class Chain:
    """A single serial Markov chain: state, generator and sweep counter."""

    state: ModelState
    rng: np.random.Generator
    opts: SweepOptions = DEFAULT_OPTIONS
    sweeps: int = 0
    cfg_hash: str = ""
    sweep_seconds: list = field(default_factory=list)

    def step(self, panel: StreamPanel, opts: SweepOptions | None = None) -> ModelState:
        t0 = time.perf_counter()
        self.state = gibbs_sweep(self.state, panel, self.rng, opts or self.opts)
        self.sweep_seconds.append(time.perf_counter() - t0)
        self.sweeps += 1
        return self.state

    def save(self, path) -> None:
        write_checkpoint(path, self.state, self.rng, self.sweeps, self.cfg_hash, self.opts)

    @classmethod
    def load(cls, path, cfg_hash: str | None = None) -> "Chain":
        doc = read_checkpoint(path, cfg_hash)
        return cls(doc["state"], doc["rng"], doc["options"], doc["sweeps"], doc["config_hash"])
