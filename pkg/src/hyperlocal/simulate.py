"""Synthetic panels with known latent indices.

Scenario parameters are given in log-price units, the same units as the
deviations ``log(price) - log(g_t)``. The returned panel and ground truth are
in model units, i.e. multiplied by :data:`~hyperlocal.ingest.SCALE` (variances
by its square), so they can be fed straight to the sampler.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .ingest import SCALE, StreamPanel, build_panel
from .ssm import A_CLIP


@dataclass
class ScenarioConfig:
    p: int = 20
    T: int = 213
    cluster_sizes: tuple[int, ...] = (4, 4, 4, 8)
    mu_a: float = 0.99
    sigma_a_sq: float = 0.005 ** 2
    mu_lambda: float = 0.15
    sigma_lambda_sq: float = 0.03 ** 2
    sigma0_sq: float = 0.03 ** 2
    R_range: tuple[float, float] = (0.03, 0.08)
    H: int = 3
    beta_var: float = 0.25
    hedonic_logsd: float = 0.3
    count_mean: float = 3.0
    count_dispersion: float = 1.0
    counts: np.ndarray | None = None   # optional fixed (T, p) observation calendar
    seed: int = 0
    region_prefix: str = "sim"

    def validate(self):
        sizes = tuple(int(s) for s in self.cluster_sizes)
        if any(s < 1 for s in sizes):
            raise ConfigError("cluster sizes must be at least 1")
        if sum(sizes) != self.p:
            raise ConfigError(f"cluster sizes sum to {sum(sizes)}, expected p = {self.p}")
        if self.T < 1:
            raise ConfigError("T must be positive")
        for name in ("mu_a", "mu_lambda"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if min(self.sigma_a_sq, self.sigma_lambda_sq, self.sigma0_sq, self.beta_var) < 0:
            raise ConfigError("variances must be non-negative")
        lo, hi = self.R_range
        if lo < 0 or hi < lo:
            raise ConfigError("R_range must satisfy 0 <= lo <= hi")
        if self.counts is not None and np.shape(self.counts) != (self.T, self.p):
            raise ConfigError("counts must have shape (T, p)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = None if self.counts is None else np.asarray(self.counts).tolist()
        d["cluster_sizes"] = list(self.cluster_sizes)
        d["R_range"] = list(self.R_range)
        return d

    @classmethod
    def from_dict(cls, d) -> "ScenarioConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario key(s): {sorted(unknown)}")
        for key in ("cluster_sizes", "R_range"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("counts") is not None:
            d["counts"] = np.asarray(d["counts"], dtype=np.int64)
        return cls(**d)


@dataclass
class GroundTruth:
    """Generating values in model units; ``x_true`` includes the initial state as row 0."""

    z_true: np.ndarray
    x_true: np.ndarray
    eta_true: np.ndarray
    lambda_true: np.ndarray
    a_true: np.ndarray
    beta_true: np.ndarray
    R_true: np.ndarray
    sigma0_true: float

    def to_json(self, path) -> None:
        doc = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "GroundTruth":
        with open(path) as fh:
            d = json.load(fh)
        return cls(
            z_true=np.asarray(d["z_true"], dtype=np.int64), x_true=np.asarray(d["x_true"]),
            eta_true=np.asarray(d["eta_true"]), lambda_true=np.asarray(d["lambda_true"]),
            a_true=np.asarray(d["a_true"]), beta_true=np.asarray(d["beta_true"]),
            R_true=np.asarray(d["R_true"]), sigma0_true=float(d["sigma0_true"]),
        )


def draw_counts(rng, T, p, mean, dispersion) -> np.ndarray:
    """Negative-binomial sales counts per (month, region) with the given mean."""
    if mean <= 0:
        return np.zeros((T, p), dtype=np.int64)
    return rng.negative_binomial(dispersion, dispersion / (dispersion + mean), size=(T, p)).astype(np.int64)


def simulate_panel(cfg: ScenarioConfig) -> tuple[StreamPanel, GroundTruth]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    p, T, H = cfg.p, cfg.T, cfg.H
    sizes = np.asarray(cfg.cluster_sizes, dtype=np.int64)
    K = len(sizes)
    z = np.repeat(np.arange(K), sizes)

    a = rng.normal(cfg.mu_a, np.sqrt(cfg.sigma_a_sq), p)
    lam = rng.normal(cfg.mu_lambda, np.sqrt(cfg.sigma_lambda_sq), p)
    R = rng.uniform(cfg.R_range[0], cfg.R_range[1], p)
    beta = rng.normal(0.0, np.sqrt(cfg.beta_var), (p, H))
    s2 = cfg.sigma0_sq

    eta = rng.standard_normal((T, K))
    x = np.empty((T + 1, p))
    v0 = s2 / (1.0 - np.minimum(a * a, A_CLIP))
    x[0] = np.sqrt(v0) * rng.standard_normal(p)
    for t in range(T):
        x[t + 1] = a * x[t] + lam * eta[t, z] + np.sqrt(s2) * rng.standard_normal(p)

    counts = (np.asarray(cfg.counts, dtype=np.int64) if cfg.counts is not None
              else draw_counts(rng, T, p, cfg.count_mean, cfg.count_dispersion))
    month, region = np.nonzero(counts)
    reps = counts[month, region]
    month = np.repeat(month, reps)
    region = np.repeat(region, reps)
    n = len(month)
    if H:
        # skewed like sizes and counts, then standardized; centering keeps
        # the hedonic term from shifting the level of x
        u = np.exp(cfg.hedonic_logsd * rng.standard_normal((n, H)))
        if n > 1:
            sd = u.std(axis=0)
            u = (u - u.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    else:
        u = np.zeros((n, 0))
    noise = np.sqrt(R[region]) * rng.standard_normal(n)
    y_log = x[month + 1, region] + np.einsum("nh,nh->n", u, beta[region]) + noise

    ids = tuple(f"{cfg.region_prefix}{i:03d}" for i in range(p))
    panel = build_panel(region, month, SCALE * y_log, u, ids, T)
    truth = GroundTruth(
        z_true=z, x_true=SCALE * x, eta_true=eta, lambda_true=SCALE * lam, a_true=a,
        beta_true=SCALE * beta, R_true=SCALE ** 2 * R, sigma0_true=SCALE ** 2 * s2,
    )
    return panel, truth


def resimulate(panel: StreamPanel, x, beta, R, rng: np.random.Generator) -> StreamPanel:
    """Fresh observations on the same calendar and hedonics given states and parameters."""
    r = panel.obs_region
    mean = x[panel.obs_month + 1, r]
    if panel.H:
        mean = mean + np.einsum("nh,nh->n", panel.u, beta[r])
    y = mean + np.sqrt(R[r]) * rng.standard_normal(panel.n_obs)
    return build_panel(r, panel.obs_month, y, panel.u, panel.region_ids, panel.T, beta=beta)


@dataclass
class TestSet:
    """Held-out individual sales (model units) with their region indices."""

    region_ids: tuple[str, ...]
    region: np.ndarray
    month: np.ndarray
    y: np.ndarray
    u: np.ndarray

    __test__ = False  # not a pytest class

    def __len__(self):
        return len(self.y)

    def to_csv(self, path) -> None:
        H = self.u.shape[1] if self.u.ndim == 2 else 0
        with open(path, "w") as fh:
            fh.write(",".join(["region_id", "month_index", "y"] + [f"u_{h + 1}" for h in range(H)]) + "\n")
            for j in range(len(self)):
                row = [self.region_ids[self.region[j]], str(int(self.month[j])), repr(float(self.y[j]))]
                row += [repr(float(v)) for v in self.u[j]]
                fh.write(",".join(row) + "\n")

    @classmethod
    def from_csv(cls, path, region_ids) -> "TestSet":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
        H = len(header) - 3
        index = {r: k for k, r in enumerate(region_ids)}
        unknown = sorted({r[0] for r in rows} - set(index))
        if unknown:
            raise KeyError(f"unknown region id(s) in test set: {unknown[:5]}")
        return cls(
            tuple(region_ids),
            np.array([index[r[0]] for r in rows], dtype=np.int64),
            np.array([int(r[1]) for r in rows], dtype=np.int64),
            np.array([float(r[2]) for r in rows]),
            np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), H),
        )


def holdout_split(panel: StreamPanel, fraction: float, rng: np.random.Generator) -> tuple[StreamPanel, TestSet]:
    """Per-region random split of individual sales into train and test."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("holdout fraction must be in [0, 1)")
    test = np.zeros(panel.n_obs, dtype=bool)
    for i in range(panel.p):
        idx = np.flatnonzero(panel.obs_region == i)
        k = int(round(fraction * len(idx)))
        if k:
            test[rng.choice(idx, size=k, replace=False)] = True
    tr = ~test
    train = build_panel(panel.obs_region[tr], panel.obs_month[tr], panel.y[tr], panel.u[tr],
                        panel.region_ids, panel.T, beta=panel.beta, excluded=panel.excluded)
    held = TestSet(panel.region_ids, panel.obs_region[test], panel.obs_month[test], panel.y[test], panel.u[test])
    return train, held
