import io
import logging

import numpy as np
import pytest

from hyperlocal.errors import DataError, DimensionError, SchemaError, SingularFitError
from hyperlocal.ingest import (
    GlobalTrend,
    Schema,
    StreamPanel,
    TransactionSet,
    build_panel,
    classical_decomposition,
    detrend_and_bin,
    estimate_global_trend,
    parse_transactions,
    refresh_suffstats,
)

HEADER = "region_id,sale_date,price,bathrooms,finished_sqft,lot_sqft\n"


def _csv(rows):
    return io.BytesIO((HEADER + "".join(r + "\n" for r in rows)).encode())


def test_parse_well_formed():
    tx = parse_transactions(_csv(["a,1997-01,100000,2,1500,5000",
                                  "a,1997-03,120000,1,900,3000",
                                  "b,1998-02,90000,3,2000,8000"]))
    assert len(tx) == 3 and tx.rejects == []
    assert tx.month.tolist() == [0, 2, 13]
    assert tx.H == 3


def test_parse_rejects():
    tx = parse_transactions(_csv(["a,1997-01,100000,2,1500,5000",
                                  "a,1997-03,0,1,900,3000",
                                  "b,1998-02,90000,3,2000,8000"]))
    assert len(tx) == 2
    assert tx.rejects == [(2, "nonpositive price")]
    tx = parse_transactions(_csv(["a,Jan 97,100000,2,1500,5000", "a,1997-13,1,1,1,1", "a,1997-02,x,1,1,1"]))
    assert [r for _, r in tx.rejects] == ["unparseable date", "unparseable date", "unparseable price"]


def test_parse_missing_column():
    src = io.BytesIO(b"region_id,sale_date,bathrooms,finished_sqft,lot_sqft\na,1997-01,1,1,1\n")
    with pytest.raises(SchemaError, match="price"):
        parse_transactions(src)


def test_parse_custom_schema_and_anchor():
    src = io.BytesIO(b"tract,date,amount\nx,2001-06,5\n")
    tx = parse_transactions(src, Schema(region="tract", date="date", price="amount", hedonics=(), anchor="2001-01"))
    assert tx.month.tolist() == [5] and tx.H == 0


def _tx_from_effects(alpha, beta, n_per_month=6, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    T, H = len(alpha), len(beta)
    month = np.repeat(np.arange(T), n_per_month)
    u = rng.normal(size=(len(month), H))
    logp = alpha[month] + u @ beta + noise * rng.normal(size=len(month))
    regions = np.array(["r0", "r1"])[rng.integers(0, 2, len(month))]
    return TransactionSet.from_arrays(regions, month, np.exp(logp), u)


def test_trend_constant_price():
    T = 36
    tx = _tx_from_effects(np.full(T, np.log(2e5)), np.zeros(3))
    gt = estimate_global_trend(tx, T, 3)
    np.testing.assert_allclose(gt.monthly_effects, np.log(2e5), atol=1e-9)
    np.testing.assert_allclose(gt.seasonal_component, 0.0, atol=1e-9)
    np.testing.assert_allclose(gt.g, gt.g[0], rtol=1e-9)


def test_trend_recovers_noiseless_coefficients():
    T = 40
    alpha = 0.01 * np.arange(T)
    beta = np.array([0.5, 0.2, 0.1])
    gt = estimate_global_trend(_tx_from_effects(alpha, beta), T, 3)
    np.testing.assert_allclose(gt.monthly_effects, alpha, atol=1e-8)
    np.testing.assert_allclose(gt.hedonic_coeffs, beta, atol=1e-8)
    np.testing.assert_allclose(gt.g, np.exp(gt.trend_component + gt.seasonal_component))


def test_trend_recovers_sinusoid():
    T = 120
    s = 0.05 * np.sin(2 * np.pi * np.arange(T) / 12)
    alpha = 11.5 + 0.004 * np.arange(T) + s
    gt = estimate_global_trend(_tx_from_effects(alpha, np.zeros(1)), T, 1)
    err = np.linalg.norm(gt.seasonal_component - s) / np.linalg.norm(s)
    assert err < 0.05
    window = np.convolve(gt.seasonal_component, np.ones(12), mode="valid")
    assert np.abs(window).max() < 1e-9


def test_trend_errors():
    tx = _tx_from_effects(np.zeros(30), np.zeros(1))
    keep = tx.month != 4
    sub = TransactionSet.from_arrays(tx.region_ids[keep], tx.month[keep], tx.price[keep], tx.hedonics[keep])
    with pytest.raises(DataError, match="month"):
        estimate_global_trend(sub, 30, 1)
    # a hedonic constant across all sales is collinear with the month indicators
    const = TransactionSet.from_arrays(tx.region_ids, tx.month, tx.price, np.ones((len(tx), 1)), ["pool"])
    with pytest.raises(SingularFitError) as exc:
        estimate_global_trend(const, 30, 1)
    assert exc.value.columns


def test_decomposition_endpoints_repeat():
    trend, seasonal = classical_decomposition(np.arange(48, dtype=float))
    np.testing.assert_allclose(trend[:6], trend[6])
    np.testing.assert_allclose(trend[-6:], trend[-7])
    np.testing.assert_allclose(seasonal, 0.0, atol=1e-12)


def test_detrend_scaling():
    g = GlobalTrend.flat(3)
    g = GlobalTrend(np.array([1e5, 2e5, 3e5]), g.trend_component, g.seasonal_component, np.zeros(0), g.monthly_effects)
    tx = TransactionSet.from_arrays(["a", "b", "a"], [0, 1, 2], [1e5, 2e5, 3e5], np.zeros((3, 0)))
    np.testing.assert_array_equal(detrend_and_bin(tx, g).y, 0.0)
    tx = TransactionSet.from_arrays(["a"], [1], [2e5 * np.exp(0.01)], np.zeros((1, 0)))
    assert detrend_and_bin(tx, g).y[0] == pytest.approx(2.0, abs=1e-12)


def test_detrend_realistic_band_sanity():
    # deviations of a few percent around the trend land within a few units of zero
    rng = np.random.default_rng(0)
    T = 24
    g = GlobalTrend(np.full(T, 3e5), np.zeros(T), np.zeros(T), np.zeros(0), np.zeros(T))
    price = 3e5 * np.exp(rng.normal(0, 0.003, 5000))
    tx = TransactionSet.from_arrays(["a"] * 5000, rng.integers(0, T, 5000), price, np.zeros((5000, 0)))
    y = detrend_and_bin(tx, g).y
    lo, hi = np.quantile(y, [0.01, 0.99])
    assert -5 < lo < 0 < hi < 5


def test_detrend_excludes_empty_regions(caplog):
    g = GlobalTrend.flat(2)
    tx = TransactionSet.from_arrays(["a", "c"], [0, 1], [1.0, 1.0], np.zeros((2, 0)))
    with caplog.at_level(logging.WARNING):
        panel = detrend_and_bin(tx, g, regions=["a", "b", "c"])
    assert panel.region_ids == ("a", "c") and panel.excluded == ("b",)
    assert "b" in caplog.text


def test_detrend_uncovered_month():
    tx = TransactionSet.from_arrays(["a"], [5], [1.0], np.zeros((1, 0)))
    with pytest.raises(DataError):
        detrend_and_bin(tx, GlobalTrend.flat(3))


def _random_panel(rng, p=4, T=6, H=2, n=80):
    return build_panel(rng.integers(0, p, n), rng.integers(0, T, n), rng.normal(size=n),
                       rng.normal(size=(n, H)), tuple(f"r{i}" for i in range(p)), T)


def test_refresh_examples():
    panel = build_panel([0], [0], [5.0], [[2.0]], ("a",), 1)
    assert panel.psi_bar[0, 0] == 5.0
    assert refresh_suffstats(panel, [[1.0]]).psi_bar[0, 0] == 3.0
    with pytest.raises(DimensionError):
        refresh_suffstats(panel, np.zeros((2, 1)))


def test_refresh_matches_direct_loop():
    rng = np.random.default_rng(1)
    panel = _random_panel(rng)
    beta = rng.normal(size=(panel.p, panel.H))
    fast = refresh_suffstats(panel, beta)
    for (i, t), obs in panel.cells.items():
        vals = [y - np.dot(u, beta[i]) for y, u in obs]
        assert fast.psi_bar[t, i] == pytest.approx(np.mean(vals), abs=1e-12)
        assert fast.suff[(i, t)][1] == len(obs)
    assert np.all(fast.psi_bar[fast.counts == 0] == 0.0)
    np.testing.assert_array_equal(fast.counts, panel.counts)


def test_order_invariance_and_counts():
    rng = np.random.default_rng(2)
    n, p, T = 60, 3, 5
    r, t, y, u = rng.integers(0, p, n), rng.integers(0, T, n), rng.normal(size=n), rng.normal(size=(n, 1))
    perm = rng.permutation(n)
    ids = ("a", "b", "c")
    one, two = build_panel(r, t, y, u, ids, T), build_panel(r[perm], t[perm], y[perm], u[perm], ids, T)
    np.testing.assert_allclose(one.psi_bar, two.psi_bar, atol=1e-14)
    np.testing.assert_array_equal(one.counts, two.counts)
    np.testing.assert_array_equal(one.region_obs_counts(), np.bincount(r, minlength=p))


def test_csv_round_trips(tmp_path):
    rng = np.random.default_rng(3)
    panel = _random_panel(rng)
    panel.to_csv(tmp_path / "panel.csv")
    back = StreamPanel.from_csv(tmp_path / "panel.csv", T=panel.T, region_ids=panel.region_ids)
    np.testing.assert_array_equal(back.counts, panel.counts)
    np.testing.assert_allclose(back.psi_bar, panel.psi_bar)
    T = 30
    gt = estimate_global_trend(_tx_from_effects(0.01 * np.arange(T), np.zeros(1), noise=0.01), T, 1)
    gt.to_csv(tmp_path / "g.csv")
    np.testing.assert_array_equal(GlobalTrend.from_csv(tmp_path / "g.csv").g, gt.g)
