"""Transaction parsing, global trend estimation and binning into region streams.

Prices enter the model as scaled log deviations from a market-wide monthly
level ``g_t``::

    y = 200 * (log(price) - log(g_t))

Each region becomes one data stream; each (month, region) cell keeps its raw
observations plus two sufficient statistics, the mean hedonic-adjusted value
``psi_bar`` and the count ``L``.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DataError, DimensionError, SchemaError, SingularFitError

logger = logging.getLogger(__name__)

SCALE = 200.0
PERIOD = 12


@dataclass(frozen=True)
class Transaction:
    region_id: str
    month: int
    price: float
    hedonics: tuple[float, ...]


@dataclass(frozen=True)
class Schema:
    """Column names of the transaction CSV and the month anchor."""

    region: str = "region_id"
    date: str = "sale_date"
    price: str = "price"
    hedonics: tuple[str, ...] = ("bathrooms", "finished_sqft", "lot_sqft")
    anchor: str = "1997-01"
    n_months: int | None = None


@dataclass
class TransactionSet:
    region_ids: np.ndarray  # object array of str
    month: np.ndarray
    price: np.ndarray
    hedonics: np.ndarray  # (n, H)
    hedonic_names: tuple[str, ...] = ()
    rejects: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.price)

    @property
    def H(self) -> int:
        return self.hedonics.shape[1]

    def __iter__(self):
        for r, t, p, u in zip(self.region_ids, self.month, self.price, self.hedonics):
            yield Transaction(str(r), int(t), float(p), tuple(float(v) for v in u))

    @classmethod
    def from_arrays(cls, region_ids, month, price, hedonics, hedonic_names=None):
        hedonics = np.asarray(hedonics, dtype=float)
        if hedonics.ndim == 1:
            hedonics = hedonics[:, None]
        n = len(price)
        if hedonics.shape[0] != n or len(month) != n or len(region_ids) != n:
            raise DimensionError("transaction columns have different lengths")
        names = tuple(hedonic_names or (f"u_{h + 1}" for h in range(hedonics.shape[1])))
        return cls(
            region_ids=np.asarray(region_ids, dtype=object),
            month=np.asarray(month, dtype=np.int64),
            price=np.asarray(price, dtype=float),
            hedonics=hedonics,
            hedonic_names=names,
        )


def month_index(date: str, anchor: str) -> int:
    """Months elapsed between ``anchor`` and ``date`` (both ``YYYY-MM``)."""
    y, m = _parse_year_month(date)
    ay, am = _parse_year_month(anchor)
    return (y - ay) * 12 + (m - am)


def _parse_year_month(text: str) -> tuple[int, int]:
    parts = text.strip().split("-")
    if len(parts) < 2:
        raise ValueError(f"expected YYYY-MM, got {text!r}")
    year, month = int(parts[0]), int(parts[1])
    if not 1 <= month <= 12 or len(parts[0]) != 4:
        raise ValueError(f"expected YYYY-MM, got {text!r}")
    return year, month


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def parse_transactions(source, schema: Schema | None = None) -> TransactionSet:
    """Read a transaction CSV.

    Rows that fail validation are skipped and recorded in
    ``TransactionSet.rejects`` as ``(row_number, reason)``; row numbers count
    data rows from 1. A missing declared column raises :class:`SchemaError`.
    """
    schema = schema or Schema()
    fh = _open_text(source)
    try:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [schema.region, schema.date, schema.price, *schema.hedonics]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"missing column(s): {', '.join(missing)}")

        regions, months, prices, hed, rejects = [], [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            try:
                t = month_index(row[schema.date], schema.anchor)
            except (ValueError, AttributeError):
                rejects.append((row_no, "unparseable date"))
                continue
            if t < 0 or (schema.n_months is not None and t >= schema.n_months):
                rejects.append((row_no, "month outside panel"))
                continue
            try:
                price = float(row[schema.price])
            except (TypeError, ValueError):
                rejects.append((row_no, "unparseable price"))
                continue
            if not np.isfinite(price) or price <= 0:
                rejects.append((row_no, "nonpositive price"))
                continue
            try:
                u = [float(row[c]) for c in schema.hedonics]
            except (TypeError, ValueError):
                rejects.append((row_no, "nonnumeric hedonic"))
                continue
            if not all(np.isfinite(u)):
                rejects.append((row_no, "nonnumeric hedonic"))
                continue
            regions.append(row[schema.region])
            months.append(t)
            prices.append(price)
            hed.append(u)
    finally:
        if isinstance(source, (str, os.PathLike)):
            fh.close()

    H = len(schema.hedonics)
    txs = TransactionSet.from_arrays(
        regions,
        np.array(months, dtype=np.int64),
        np.array(prices, dtype=float),
        np.array(hed, dtype=float).reshape(len(prices), H),
        schema.hedonics,
    )
    txs.rejects = rejects
    if rejects:
        logger.info("rejected %d of %d rows", len(rejects), len(rejects) + len(txs))
    return txs


# ---------------------------------------------------------------------------
# Global trend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GlobalTrend:
    g: np.ndarray
    trend_component: np.ndarray
    seasonal_component: np.ndarray
    hedonic_coeffs: np.ndarray
    monthly_effects: np.ndarray

    @property
    def T(self) -> int:
        return len(self.g)

    @classmethod
    def flat(cls, T: int, H: int = 0) -> "GlobalTrend":
        """Unit global level; used when data are already detrended."""
        z = np.zeros(T)
        return cls(np.ones(T), z, z.copy(), np.zeros(H), z.copy())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["month_index", "g", "trend", "seasonal"])
            for t in range(self.T):
                w.writerow([t, repr(float(self.g[t])), repr(float(self.trend_component[t])),
                            repr(float(self.seasonal_component[t]))])

    @classmethod
    def from_csv(cls, path) -> "GlobalTrend":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        rows.sort(key=lambda r: int(r["month_index"]))
        g = np.array([float(r["g"]) for r in rows])
        trend = np.array([float(r["trend"]) for r in rows])
        seasonal = np.array([float(r["seasonal"]) for r in rows])
        return cls(g, trend, seasonal, np.zeros(0), trend + seasonal)


def classical_decomposition(series, period: int = PERIOD):
    """Additive trend + seasonal split using a centered moving average.

    The trend is the 2x``period`` centered moving average, extended at both
    ends by repeating the nearest defined value. Seasonal indices are the
    per-phase means of the detrended interior, shifted to sum to zero.
    """
    series = np.asarray(series, dtype=float)
    T = len(series)
    if T < 2 * period:
        raise DataError(f"seasonal decomposition needs at least {2 * period} months, got {T}")
    half = period // 2
    if period % 2 == 0:
        w = np.r_[0.5, np.ones(period - 1), 0.5] / period
    else:
        w = np.ones(period) / period
    inner = np.convolve(series, w, mode="valid")  # indices half .. T-half-1
    trend = np.empty(T)
    trend[half:T - half] = inner
    trend[:half] = inner[0]
    trend[T - half:] = inner[-1]

    idx = np.arange(half, T - half)
    detr = series[idx] - inner
    phase = idx % period
    season = np.array([detr[phase == k].mean() for k in range(period)])
    season -= season.mean()
    seasonal = season[np.arange(T) % period]
    return trend, seasonal


def estimate_global_trend(tx: TransactionSet, T: int, H: int | None = None) -> GlobalTrend:
    """Fit log price on monthly indicators plus hedonics, then decompose.

    The regression has no separate intercept: the ``T`` monthly effects carry
    the level. The noise part of the decomposition is discarded.
    """
    H = tx.H if H is None else H
    if tx.H != H:
        raise DimensionError(f"transactions carry {tx.H} hedonics, expected {H}")
    if len(tx) and (tx.month.min() < 0 or tx.month.max() >= T):
        raise DataError("transaction month outside [0, T)")
    counts = np.bincount(tx.month, minlength=T)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise DataError(f"unidentifiable monthly effect: no transactions in month(s) {empty.tolist()}")

    n = len(tx)
    X = np.zeros((n, T + H))
    X[np.arange(n), tx.month] = 1.0
    X[:, T:] = tx.hedonics
    names = [f"month_{t}" for t in range(T)] + list(tx.hedonic_names or [f"u_{h + 1}" for h in range(H)])

    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps if len(diag) else 0.0
    rank = int((diag > tol).sum())
    if rank < X.shape[1]:
        bad = sorted(piv[rank:].tolist())
        raise SingularFitError(
            "rank-deficient global design; dependent column(s): " + ", ".join(names[j] for j in bad),
            columns=[names[j] for j in bad],
        )

    coef, *_ = np.linalg.lstsq(X, np.log(tx.price), rcond=None)
    alpha = coef[:T]
    beta = coef[T:]
    trend, seasonal = classical_decomposition(alpha)
    return GlobalTrend(
        g=np.exp(trend + seasonal),
        trend_component=trend,
        seasonal_component=seasonal,
        hedonic_coeffs=beta,
        monthly_effects=alpha,
    )


# ---------------------------------------------------------------------------
# Stream panel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamPanel:
    """Detrended observations grouped into (month, region) cells.

    Observations are stored flat, sorted by month then region, with
    ``time_ptr[t]:time_ptr[t+1]`` delimiting month ``t``. Cell arrays are
    time-major, shape ``(T, p)``. ``psi_bar`` and ``psi_sq`` depend on the
    hedonic coefficients in ``beta``; call :func:`refresh_suffstats` after
    changing them.
    """

    region_ids: tuple[str, ...]
    T: int
    H: int
    obs_region: np.ndarray
    obs_month: np.ndarray
    y: np.ndarray
    u: np.ndarray
    time_ptr: np.ndarray
    counts: np.ndarray
    psi_bar: np.ndarray
    psi_sq: np.ndarray
    beta: np.ndarray
    excluded: tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return len(self.region_ids)

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def cell(self, i: int, t: int):
        """Raw ``(y, u)`` of region ``i`` in month ``t``."""
        lo, hi = self.time_ptr[t], self.time_ptr[t + 1]
        sel = np.flatnonzero(self.obs_region[lo:hi] == i) + lo
        return self.y[sel], self.u[sel]

    @property
    def cells(self) -> dict:
        out = {}
        for t in range(self.T):
            for i in np.flatnonzero(self.counts[t]):
                y, u = self.cell(int(i), t)
                out[(int(i), t)] = list(zip(y.tolist(), [tuple(r) for r in u.tolist()]))
        return out

    @property
    def suff(self) -> dict:
        return {
            (i, t): (float(self.psi_bar[t, i]), int(self.counts[t, i]))
            for t in range(self.T)
            for i in range(self.p)
        }

    def region_obs_counts(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def adjusted(self, beta=None) -> np.ndarray:
        """Per-observation ``y - u @ beta[region]``."""
        beta = self.beta if beta is None else beta
        if self.H == 0:
            return self.y.copy()
        return self.y - np.einsum("nh,nh->n", self.u, beta[self.obs_region])

    def to_csv(self, path) -> None:
        order = np.lexsort((self.obs_month, self.obs_region))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region_id", "month_index", "y"] + [f"u_{h + 1}" for h in range(self.H)])
            for j in order:
                w.writerow([self.region_ids[self.obs_region[j]], int(self.obs_month[j]), repr(float(self.y[j]))]
                           + [repr(float(v)) for v in self.u[j]])

    @classmethod
    def from_csv(cls, path, T: int | None = None, region_ids: Sequence[str] | None = None) -> "StreamPanel":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:3] != ["region_id", "month_index", "y"]:
                raise SchemaError("panel CSV must start with region_id, month_index, y")
            H = len(header) - 3
            regions, months, ys, us = [], [], [], []
            for row in reader:
                regions.append(row[0])
                months.append(int(row[1]))
                ys.append(float(row[2]))
                us.append([float(v) for v in row[3:]])
        if region_ids is None:
            region_ids = list(dict.fromkeys(regions))
        if T is None:
            T = max(months) + 1 if months else 0
        index = {r: k for k, r in enumerate(region_ids)}
        return build_panel(
            np.array([index[r] for r in regions], dtype=np.int64),
            np.array(months, dtype=np.int64),
            np.array(ys, dtype=float),
            np.array(us, dtype=float).reshape(len(ys), H),
            region_ids=tuple(region_ids),
            T=T,
        )


def build_panel(obs_region, obs_month, y, u, region_ids, T, beta=None, excluded=()) -> StreamPanel:
    """Assemble a :class:`StreamPanel` from flat observation arrays."""
    obs_region = np.asarray(obs_region, dtype=np.int64)
    obs_month = np.asarray(obs_month, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(len(y), -1)
    p, H = len(region_ids), u.shape[1]
    if not (len(obs_region) == len(obs_month) == len(y) == u.shape[0]):
        raise DimensionError("observation arrays have different lengths")
    if len(y) and (obs_month.min() < 0 or obs_month.max() >= T):
        raise DataError("observation month outside [0, T)")
    if len(y) and (obs_region.min() < 0 or obs_region.max() >= p):
        raise DataError("observation region index out of range")
    order = np.lexsort((obs_region, obs_month))
    obs_region, obs_month, y, u = obs_region[order], obs_month[order], y[order], u[order]
    time_ptr = np.searchsorted(obs_month, np.arange(T + 1))
    counts = np.zeros((T, p), dtype=np.int64)
    np.add.at(counts, (obs_month, obs_region), 1)
    beta = np.zeros((p, H)) if beta is None else np.asarray(beta, dtype=float)
    panel = StreamPanel(
        region_ids=tuple(region_ids), T=T, H=H,
        obs_region=obs_region, obs_month=obs_month, y=y, u=u, time_ptr=time_ptr,
        counts=counts, psi_bar=np.zeros((T, p)), psi_sq=np.zeros((T, p)),
        beta=np.zeros((p, H)), excluded=tuple(excluded),
    )
    return refresh_suffstats(panel, beta)


def detrend_and_bin(tx: TransactionSet, g: GlobalTrend, regions: Sequence[str] | None = None) -> StreamPanel:
    """Scale prices to log deviations from ``g`` and bin by (month, region).

    ``regions`` fixes the stream order; declared regions without any
    transaction are dropped with a warning and listed in ``panel.excluded``.
    """
    T = g.T
    if len(tx) and (tx.month.min() < 0 or tx.month.max() >= T):
        raise DataError("transaction months not covered by the global trend")
    seen = list(dict.fromkeys(str(r) for r in tx.region_ids))
    if regions is None:
        regions = seen
    present = set(seen)
    excluded = tuple(r for r in regions if r not in present)
    if excluded:
        logger.warning("dropping %d region(s) without transactions: %s", len(excluded), ", ".join(excluded))
    kept = [r for r in regions if r in present]
    index = {r: k for k, r in enumerate(kept)}
    unknown = present - set(index)
    if unknown:
        raise DataError(f"transactions reference undeclared region(s): {sorted(unknown)}")
    y = SCALE * (np.log(tx.price) - np.log(g.g[tx.month]))
    obs_region = np.array([index[str(r)] for r in tx.region_ids], dtype=np.int64)
    return build_panel(obs_region, tx.month, y, tx.hedonics, tuple(kept), T, excluded=excluded)


def refresh_suffstats(panel: StreamPanel, beta) -> StreamPanel:
    """Recompute ``psi_bar`` and ``psi_sq`` for hedonic coefficients ``beta`` (p x H)."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (panel.p, panel.H):
        raise DimensionError(f"beta has shape {beta.shape}, expected {(panel.p, panel.H)}")
    psi = panel.adjusted(beta)
    p, T = panel.p, panel.T
    flat = panel.obs_month * p + panel.obs_region
    sums = np.bincount(flat, weights=psi, minlength=T * p).reshape(T, p)
    sq = np.bincount(flat, weights=psi * psi, minlength=T * p).reshape(T, p)
    with np.errstate(invalid="ignore", divide="ignore"):
        psi_bar = np.where(panel.counts > 0, sums / np.maximum(panel.counts, 1), 0.0)
    return replace(panel, psi_bar=psi_bar, psi_sq=sq, beta=beta.copy())


def select_regions(panel: StreamPanel, keep: Sequence[int]) -> StreamPanel:
    """Sub-panel restricted to the listed region indices (renumbered in order)."""
    keep = list(keep)
    remap = -np.ones(panel.p, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    mask = remap[panel.obs_region] >= 0
    return build_panel(
        remap[panel.obs_region[mask]], panel.obs_month[mask], panel.y[mask], panel.u[mask],
        tuple(panel.region_ids[k] for k in keep), panel.T, beta=panel.beta[keep],
    )
