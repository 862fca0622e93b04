import numpy as np
import pytest

from hyperlocal.errors import ConfigError
from hyperlocal.ingest import SCALE
from hyperlocal.simulate import (
    GroundTruth,
    ScenarioConfig,
    TestSet,
    holdout_split,
    resimulate,
    simulate_panel,
)


def test_default_shape():
    panel, truth = simulate_panel(ScenarioConfig())
    assert (panel.p, panel.T, panel.H) == (20, 213, 3)
    np.testing.assert_array_equal(np.bincount(truth.z_true), [4, 4, 4, 8])
    assert truth.x_true.shape == (214, 20)
    assert truth.eta_true.shape == (213, 4)
    assert truth.beta_true.shape == (20, 3)


def test_degenerate_dynamics_give_flat_states():
    cfg = ScenarioConfig(T=30, mu_a=0.0, sigma_a_sq=0.0, mu_lambda=0.0, sigma_lambda_sq=0.0, sigma0_sq=0.0,
                         seed=1)
    panel, truth = simulate_panel(cfg)
    assert np.all(truth.x_true == 0)
    r = panel.obs_region
    resid = panel.y - np.einsum("nh,nh->n", panel.u, truth.beta_true[r])
    # what remains is observation noise with variance R_i
    for i in range(panel.p):
        assert abs(resid[r == i].var() / truth.R_true[i] - 1) < 0.6


def test_same_seed_is_bit_identical(tmp_path):
    a, ta = simulate_panel(ScenarioConfig(T=40, seed=5))
    b, tb = simulate_panel(ScenarioConfig(T=40, seed=5))
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    np.testing.assert_array_equal(ta.x_true, tb.x_true)
    c, _ = simulate_panel(ScenarioConfig(T=40, seed=6))
    assert not np.array_equal(a.y, c.y)


def test_innovation_covariance_matches_factor_structure():
    # averaged over seeds, cov(x_t - a x_{t-1}) within a cluster is lambda lambda' + sigma0^2 I
    ratios = []
    for seed in range(10):
        cfg = ScenarioConfig(seed=seed, count_mean=0.0)
        _, tr = simulate_panel(cfg)
        x, a = tr.x_true / SCALE, tr.a_true
        e = x[1:] - a * x[:-1]
        lam = tr.lambda_true / SCALE
        s2 = tr.sigma0_true / SCALE ** 2
        for k in range(4):
            m = tr.z_true == k
            C = np.cov(e[:, m].T)
            target = np.outer(lam[m], lam[m]) + s2 * np.eye(m.sum())
            ratios.append(C / target)
    mean_ratio = np.mean([r.mean() for r in ratios])
    assert abs(mean_ratio - 1) < 0.1
    diag = np.mean([np.diag(r).mean() for r in ratios])
    assert abs(diag - 1) < 0.1


def test_within_cluster_innovations_positively_correlated():
    positive = 0
    n = 40
    for seed in range(n):
        _, tr = simulate_panel(ScenarioConfig(seed=100 + seed, count_mean=0.0))
        e = tr.x_true[1:] - tr.a_true * tr.x_true[:-1]
        cors = []
        for k in range(4):
            c = np.corrcoef(e[:, tr.z_true == k].T)
            cors.append(c[np.triu_indices_from(c, 1)].mean())
        positive += np.mean(cors) > 0
    assert positive / n >= 0.95


def test_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(p=5, cluster_sizes=(2, 2)).validate()
    with pytest.raises(ConfigError):
        ScenarioConfig(p=2, cluster_sizes=(2, 0)).validate()
    with pytest.raises(ConfigError):
        ScenarioConfig(mu_a=float("nan")).validate()
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        simulate_panel(ScenarioConfig(p=3, cluster_sizes=(1, 1)))


def test_fixed_calendar_is_respected():
    counts = np.zeros((10, 2), dtype=np.int64)
    counts[3, 0] = 4
    counts[7, 1] = 1
    panel, _ = simulate_panel(ScenarioConfig(p=2, T=10, cluster_sizes=(2,), counts=counts))
    np.testing.assert_array_equal(panel.counts, counts)


def test_round_trips(tmp_path):
    cfg = ScenarioConfig(T=20, seed=3, counts=None)
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
    _, tr = simulate_panel(cfg)
    tr.to_json(tmp_path / "t.json")
    back = GroundTruth.from_json(tmp_path / "t.json")
    np.testing.assert_array_equal(back.x_true, tr.x_true)
    np.testing.assert_array_equal(back.z_true, tr.z_true)
    assert back.sigma0_true == tr.sigma0_true


def test_resimulate_keeps_calendar():
    panel, tr = simulate_panel(ScenarioConfig(T=25, seed=4))
    new = resimulate(panel, tr.x_true, tr.beta_true, tr.R_true, np.random.default_rng(0))
    np.testing.assert_array_equal(new.counts, panel.counts)
    np.testing.assert_array_equal(new.u, panel.u)
    assert not np.array_equal(new.y, panel.y)


def test_holdout_fraction_zero():
    panel, _ = simulate_panel(ScenarioConfig(T=30, seed=5))
    train, test = holdout_split(panel, 0.0, np.random.default_rng(0))
    assert len(test) == 0
    np.testing.assert_array_equal(train.y, panel.y)
    np.testing.assert_array_equal(train.counts, panel.counts)


def test_holdout_is_stratified_partition():
    counts = np.zeros((50, 3), dtype=np.int64)
    counts[:, :] = 2  # 100 sales per region
    panel, _ = simulate_panel(ScenarioConfig(p=3, T=50, cluster_sizes=(3,), counts=counts, seed=6))
    train, test = holdout_split(panel, 0.25, np.random.default_rng(1))
    for i in range(3):
        assert abs(np.sum(test.region == i) - 25) <= 1
        orig = np.sort(panel.y[panel.obs_region == i])
        both = np.sort(np.r_[train.y[train.obs_region == i], test.y[test.region == i]])
        np.testing.assert_array_equal(orig, both)
    assert train.counts.sum() + len(test) == panel.counts.sum()
    with pytest.raises(ConfigError):
        holdout_split(panel, 1.0, np.random.default_rng(0))


def test_test_set_csv_round_trip(tmp_path):
    panel, _ = simulate_panel(ScenarioConfig(T=12, seed=7))
    _, test = holdout_split(panel, 0.3, np.random.default_rng(2))
    test.to_csv(tmp_path / "test.csv")
    back = TestSet.from_csv(tmp_path / "test.csv", panel.region_ids)
    np.testing.assert_array_equal(back.region, test.region)
    np.testing.assert_array_equal(back.y, test.y)
    np.testing.assert_array_equal(back.u, test.u)
    empty = TestSet(panel.region_ids, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 3)))
    empty.to_csv(tmp_path / "e.csv")
    assert len(TestSet.from_csv(tmp_path / "e.csv", panel.region_ids)) == 0
