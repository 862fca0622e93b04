"""Recovery, convergence and predictive diagnostics, plus the per-region EM baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError, DimensionError
from .ingest import SCALE, GlobalTrend, StreamPanel
from .sampler import ModelState
from .ssm import ClusterView, InitialStatePrior, filter_suffstat, rts_smoother


# ---------------------------------------------------------------------------
# Cluster recovery
# ---------------------------------------------------------------------------


def confusion(z_est, z_true) -> np.ndarray:
    z_est = np.asarray(z_est)
    z_true = np.asarray(z_true)
    if z_est.shape != z_true.shape:
        raise DimensionError(f"labelings have lengths {len(z_est)} and {len(z_true)}")
    _, e = np.unique(z_est, return_inverse=True)
    _, t = np.unique(z_true, return_inverse=True)
    C = np.zeros((e.max() + 1 if len(e) else 0, t.max() + 1 if len(t) else 0), dtype=np.int64)
    np.add.at(C, (e, t), 1)
    return C


def hamming_optimal(z_est, z_true) -> float:
    """Fraction of mismatched labels under the best one-to-one label mapping."""
    C = confusion(z_est, z_true)
    if C.size == 0:
        return 0.0
    n = max(C.shape)
    padded = np.zeros((n, n), dtype=np.int64)
    padded[:C.shape[0], :C.shape[1]] = C
    rows, cols = linear_sum_assignment(-padded)
    return 1.0 - padded[rows, cols].sum() / C.sum()


def coclustering(z_samples) -> np.ndarray:
    """Posterior probability that each pair of regions shares a label."""
    Z = np.asarray(z_samples)
    if Z.ndim == 1:
        Z = Z[None]
    return (Z[:, :, None] == Z[:, None, :]).mean(axis=0)


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------


def psrf(chains) -> float:
    """Gelman-Rubin potential scale reduction factor from ``m >= 2`` equal-length chains."""
    X = np.asarray(chains, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("psrf needs at least two chains")
    m, n = X.shape
    if n < 2:
        raise DataError("psrf needs at least two draws per chain")
    means = X.mean(axis=1)
    W = X.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    V = (n - 1) / n * W + (m + 1) / (m * n) * B
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    return float(np.sqrt(V / W))


# ---------------------------------------------------------------------------
# Posterior archive
# ---------------------------------------------------------------------------


SCALARS = ("sigma0_sq", "alpha", "K")


@dataclass
class ChainArchive:
    """Thinned draws from one or more chains, chain-major.

    ``x`` holds months only, shape ``(C, S, T, p)``.
    """

    z: np.ndarray
    x: np.ndarray
    a: np.ndarray
    lam: np.ndarray
    R: np.ndarray
    beta: np.ndarray
    sigma0_sq: np.ndarray
    alpha: np.ndarray
    K: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.z.shape[0]

    @property
    def n_samples(self) -> int:
        return self.z.shape[1]

    @property
    def p(self) -> int:
        return self.z.shape[2]

    @property
    def T(self) -> int:
        return self.x.shape[2]

    @classmethod
    def from_states(cls, chains: list[list[ModelState]], meta: dict | None = None) -> "ChainArchive":
        lengths = {len(c) for c in chains}
        if len(lengths) != 1:
            raise DataError("all chains must hold the same number of samples")

        def stack(fn):
            return np.array([[fn(s) for s in c] for c in chains])

        return cls(
            z=stack(lambda s: s.z), x=stack(lambda s: s.x[1:]), a=stack(lambda s: s.a),
            lam=stack(lambda s: s.lam), R=stack(lambda s: s.R), beta=stack(lambda s: s.beta),
            sigma0_sq=stack(lambda s: s.sigma0_sq), alpha=stack(lambda s: s.alpha),
            K=stack(lambda s: s.K), meta=dict(meta or {}),
        )

    def pooled(self, name: str) -> np.ndarray:
        v = getattr(self, name)
        return v.reshape((-1,) + v.shape[2:])

    def save(self, path) -> None:
        np.savez_compressed(
            path, z=self.z, x=self.x, a=self.a, lam=self.lam, R=self.R, beta=self.beta,
            sigma0_sq=self.sigma0_sq, alpha=self.alpha, K=self.K,
            meta=np.array(json.dumps(self.meta, sort_keys=True)),
        )

    @classmethod
    def load(cls, path) -> "ChainArchive":
        with np.load(path, allow_pickle=False) as f:
            arrays = {k: f[k] for k in f.files}
        meta = json.loads(str(arrays.pop("meta")))
        return cls(meta=meta, **arrays)


def monitored_scalars(archive: ChainArchive, n_states: int = 5, seed: int = 0) -> dict[str, np.ndarray]:
    """Per-chain series used for convergence checks: ``sigma0_sq``, ``K``, ``alpha`` and a few final states."""
    out = {name: np.asarray(getattr(archive, name), dtype=float) for name in SCALARS}
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(archive.p, size=min(n_states, archive.p), replace=False))
    for i in picks:
        out[f"x_T[{int(i)}]"] = archive.x[:, :, -1, i]
    return out


def diagnostics(archive: ChainArchive, threshold: float = 1.1, n_states: int = 5, seed: int = 0) -> dict:
    rhat = {}
    for name, series in monitored_scalars(archive, n_states, seed).items():
        rhat[name] = psrf(series) if archive.n_chains >= 2 else None
    finite = [v for v in rhat.values() if v is not None]
    return {
        "psrf": rhat,
        "threshold": threshold,
        "converged": bool(finite) and all(v < threshold for v in finite),
        "n_chains": archive.n_chains,
        "n_samples": archive.n_samples,
        "K_mean": float(np.mean(archive.K)),
        "sigma0_sq_mean": float(np.mean(archive.sigma0_sq)),
    }


# ---------------------------------------------------------------------------
# Indices and prediction
# ---------------------------------------------------------------------------


@dataclass
class IndexSummary:
    mean: np.ndarray   # (T, p)
    lo95: np.ndarray
    hi95: np.ndarray
    cooccurrence: np.ndarray  # (p, p)


def index_summary(archive: ChainArchive) -> IndexSummary:
    """Posterior mean and central 95% band of every ``x_{t,i}`` plus the co-clustering matrix."""
    X = archive.pooled("x")
    lo, hi = np.quantile(X, [0.025, 0.975], axis=0)
    return IndexSummary(X.mean(axis=0), lo, hi, coclustering(archive.pooled("z")))


@dataclass
class Predictions:
    y_mean: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray
    price: np.ndarray
    price_lo: np.ndarray
    price_hi: np.ndarray


def predict_prices(archive: ChainArchive, test_set, g: GlobalTrend | None, rng: np.random.Generator,
                   draws_per_sample: int = 1, level: float = 0.95) -> Predictions:
    """Posterior predictive simulation for held-out sales.

    For every posterior sample a new observation is simulated from the
    emission model; the mean is the point prediction and the central
    ``level`` interval of the simulated values gives the bounds. Values are
    mapped to prices as ``g_t * exp(y / 200)``.
    """
    n = len(test_set.y)
    if n == 0:
        empty = np.zeros(0)
        return Predictions(empty, empty, empty, empty, empty, empty)
    i, t = test_set.region, test_set.month
    X = archive.pooled("x")[:, t, i]               # (S, n)
    R = archive.pooled("R")[:, i]
    B = archive.pooled("beta")[:, i, :]            # (S, n, H)
    mean = X + np.einsum("snh,nh->sn", B, test_set.u) if B.shape[-1] else X
    sims = mean[None] + np.sqrt(R)[None] * rng.standard_normal((draws_per_sample,) + mean.shape)
    sims = sims.reshape(-1, n)
    q = (1.0 - level) / 2.0
    y_mean = sims.mean(axis=0)
    y_lo, y_hi = np.quantile(sims, [q, 1.0 - q], axis=0)
    gt = np.ones(n) if g is None else g.g[t]
    return Predictions(y_mean, y_lo, y_hi, gt * np.exp(y_mean / SCALE),
                       gt * np.exp(y_lo / SCALE), gt * np.exp(y_hi / SCALE))


def metrics(pred, truth) -> dict:
    """RMSE and absolute-percentage-error summaries; P10 counts APE <= 0.10."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise DimensionError("prediction and truth differ in length")
    if len(pred) == 0:
        return {"rmse": None, "mean_ape": None, "median_ape": None, "ape90": None, "p10": None, "n": 0}
    ape = np.abs(pred - truth) / np.abs(truth)
    return {
        "rmse": float(np.sqrt(np.mean((pred - truth) ** 2))),
        "mean_ape": float(ape.mean()),
        "median_ape": float(np.median(ape)),
        "ape90": float(np.quantile(ape, 0.9)),
        "p10": float(np.mean(ape <= 0.10)),
        "n": int(len(pred)),
    }


def rmse_x(archive_or_mean, x_true) -> float:
    """RMSE of the posterior mean index against ``x_true`` (months only), in log-price units."""
    est = archive_or_mean.pooled("x").mean(axis=0) if isinstance(archive_or_mean, ChainArchive) else archive_or_mean
    return float(np.sqrt(np.mean((np.asarray(est) - np.asarray(x_true)) ** 2)) / SCALE)


# ---------------------------------------------------------------------------
# Independent Kalman-EM baseline
# ---------------------------------------------------------------------------


LOW_DATA = 5
VAR_FLOOR = 1e-8


@dataclass
class BaselineFit:
    region: int
    x_hat: np.ndarray
    x_var: np.ndarray
    a: float
    q: float
    R: float
    beta: np.ndarray
    loglik: list
    low_data: bool
    converged: bool


def baseline_em_kalman(panel: StreamPanel, i: int, max_iter: int = 200, tol: float = 1e-8,
                       init_var: float | None = None) -> BaselineFit:
    """Scalar AR(1) state-space fit for one region by EM with a Kalman smoother.

    The initial state prior ``N(0, init_var)`` is held fixed (default: ten
    times the variance of the region's observations). Every M-step is exact,
    so the observed-data log-likelihood never decreases.
    """
    sel = np.flatnonzero(panel.obs_region == i)
    m = len(sel)
    y, u, t_obs = panel.y[sel], panel.u[sel], panel.obs_month[sel]
    T, H = panel.T, panel.H
    low = m < LOW_DATA
    counts = np.bincount(t_obs, minlength=T).astype(float)
    y_var = float(np.var(y)) if m > 1 else 1.0
    y_var = max(y_var, VAR_FLOOR)
    V0 = 10.0 * y_var if init_var is None else float(init_var)
    init = InitialStatePrior(np.zeros(1), np.array([[V0]]))

    a, q, R = 0.5, 0.1 * y_var, max(0.5 * y_var, VAR_FLOOR)
    beta = np.zeros(H)
    if m == 0:
        return BaselineFit(i, np.zeros(T), np.full(T, np.nan), a, q, R, beta, [], True, False)

    def smooth(a, q, R, beta):
        psi = y - u @ beta if H else y
        sums = np.bincount(t_obs, weights=psi, minlength=T)
        sq = np.bincount(t_obs, weights=psi * psi, minlength=T)
        ybar = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        sub = _single_region_panel(ybar, sq, counts)
        view = ClusterView([0], [a], [0.0], q, [R])
        res = filter_suffstat(view, sub, init, backend="numpy")
        ms, Vs, lag = rts_smoother(view, res, init)
        return res.loglik, ms[:, 0], Vs[:, 0, 0], lag[:, 0, 0]

    trace = []
    converged = False
    for _ in range(max_iter):
        ll, ms, Ps, lag = smooth(a, q, R, beta)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * (1.0 + abs(trace[-2])):
            converged = True
            break
        Exx = ms[:-1] ** 2 + Ps[:-1]
        Exy = ms[1:] * ms[:-1] + lag
        Eyy = ms[1:] ** 2 + Ps[1:]
        a = float(Exy.sum() / Exx.sum())
        q = max(float((Eyy - 2 * a * Exy + a * a * Exx).mean()), VAR_FLOOR)
        xm = ms[t_obs + 1]
        if H:
            beta = np.linalg.lstsq(u, y - xm, rcond=None)[0]
        r = y - xm - (u @ beta if H else 0.0)
        R = max(float((r * r + Ps[t_obs + 1]).mean()), VAR_FLOOR)
    _, ms, Ps, _ = smooth(a, q, R, beta)
    return BaselineFit(i, ms[1:], Ps[1:], a, q, R, beta, trace, low, converged)


@dataclass(frozen=True)
class _SuffOnly:
    """Minimal panel stand-in: one region, cell sufficient statistics only."""

    psi_bar: np.ndarray
    psi_sq: np.ndarray
    counts: np.ndarray
    T: int
    p: int = 1
    H: int = 0
    beta: np.ndarray = field(default_factory=lambda: np.zeros((1, 0)))


def _single_region_panel(ybar, sq, counts):
    T = len(ybar)
    return _SuffOnly(ybar.reshape(T, 1), sq.reshape(T, 1), counts.astype(np.int64).reshape(T, 1), T)
