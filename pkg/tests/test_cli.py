import csv
import json

import numpy as np
import pytest

from hyperlocal.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, main, run_bench
from hyperlocal.evaluate import ChainArchive, coclustering
from hyperlocal.ingest import StreamPanel

TINY = {"p": 4, "T": 12, "cluster_sizes": [2, 2], "H": 1, "count_mean": 2.0}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def _simulate(tmp_path, scenario=None, seed=1, name="sim"):
    cfg = _write(tmp_path / f"{name}.json", {"seed": seed, "scenario": scenario or TINY})
    out = tmp_path / name
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    return out


def test_simulate_default_shape(tmp_path):
    out = tmp_path / "d"
    assert main(["simulate", "--seed", "0", "--out", str(out)]) == 0
    panel = StreamPanel.from_csv(out / "panel.csv", T=213)
    assert (panel.p, panel.T) == (20, 213)
    truth = json.loads((out / "truth.json").read_text())
    assert np.bincount(truth["z_true"]).tolist() == [4, 4, 4, 8]
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 0 and man["command"] == "simulate"
    assert {"numpy", "scipy", "numba", "python", "hyperlocal"} <= set(man["versions"])
    assert man["wall_clock_seconds"] >= 0 and len(man["config_hash"]) == 16


def test_simulate_zero_noise_is_flat(tmp_path):
    flat = dict(TINY, mu_a=0.0, sigma_a_sq=0.0, mu_lambda=0.0, sigma_lambda_sq=0.0, sigma0_sq=0.0,
                R_range=[0.0, 0.0], beta_var=0.0)
    out = _simulate(tmp_path, flat)
    panel = StreamPanel.from_csv(out / "panel.csv", T=12)
    assert np.all(panel.y == 0)


def test_simulate_same_seed_byte_identical(tmp_path):
    a = _simulate(tmp_path, name="a")
    b = _simulate(tmp_path, name="b")
    for f in ("panel.csv", "truth.json", "scenario.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def _fit(tmp_path, sim, name, extra=(), fit=None, seed=3):
    cfg = {"seed": seed, "fit": dict({"chains": 3, "iterations": 200, "thin": 5, "checkpoint_every": 50}, **(fit or {}))}
    path = _write(tmp_path / f"{name}.json", cfg)
    out = tmp_path / name
    rc = main(["fit", "--config", path, "--panel", str(sim / "panel.csv"), "--T", "12", "--out", str(out), *extra])
    return rc, out


def test_fit_bookkeeping_and_manifest(tmp_path):
    sim = _simulate(tmp_path)
    rc, out = _fit(tmp_path, sim, "fit")
    assert rc == 0
    arc = ChainArchive.load(out / "archive.npz")
    assert arc.z.shape == (3, 20, 4) and arc.x.shape == (3, 20, 12, 4)
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["fit"]["burn_in"] is None and man["extra"]["burn_in"] == 100
    assert len(man["extra"]["chains"]) == 3


def test_fit_resume_equals_uninterrupted(tmp_path):
    sim = _simulate(tmp_path)
    assert _fit(tmp_path, sim, "full")[0] == 0
    rc, out = _fit(tmp_path, sim, "part", ["--stop-after", "70"])
    assert rc == 0 and not (out / "archive.npz").exists()
    rc, out = _fit(tmp_path, sim, "part", ["--resume"])
    assert rc == 0
    a = np.load(tmp_path / "full" / "archive.npz")
    b = np.load(out / "archive.npz")
    for k in a.files:
        if k != "meta":
            np.testing.assert_array_equal(a[k], b[k])


def test_fit_resume_refuses_changed_config(tmp_path, capsys):
    sim = _simulate(tmp_path)
    _fit(tmp_path, sim, "run", ["--stop-after", "20"])
    rc, _ = _fit(tmp_path, sim, "run", ["--resume", "--set", "fit.thin=2"])
    assert rc == EXIT_CONFIG
    assert "does not match" in capsys.readouterr().err


def test_fit_resume_refuses_corrupt_checkpoint(tmp_path):
    sim = _simulate(tmp_path)
    _, out = _fit(tmp_path, sim, "run", ["--stop-after", "20"])
    ck = out / "checkpoints" / "chain0.json"
    ck.write_text(ck.read_text()[:100])
    assert _fit(tmp_path, sim, "run", ["--resume"])[0] == EXIT_CONFIG


def test_parallel_fit_matches_serial_in_law(tmp_path):
    # sparse data and a small concentration keep the chain close to iid, so 5000 sweeps pin it down
    sim = _simulate(tmp_path, dict(TINY, p=3, T=8, cluster_sizes=[2, 1], count_mean=0.5), seed=2, name="small")
    fit = {"chains": 1, "iterations": 7000, "burn_in": 2000, "thin": 1, "checkpoint_every": 10_000}
    cc = {}
    for P in (1, 2):
        cfg = _write(tmp_path / f"p{P}.json", {"seed": 10 + P, "fit": dict(fit, workers=P),
                                                       "hyper": {"alpha_alpha": 2.0, "beta_alpha": 20.0}})
        out = tmp_path / f"p{P}"
        assert main(["fit", "--config", cfg, "--panel", str(sim / "panel.csv"), "--T", "8", "--out", str(out)]) == 0
        cc[P] = coclustering(ChainArchive.load(out / "archive.npz").pooled("z"))
    assert np.max(np.abs(cc[1] - cc[2])) < 0.03


def test_bench_small_profile_agrees(tmp_path):
    rep = run_bench(p=3, T=20, n_obs=300, reps=5, H=1, seed=0)
    assert rep["agree_1e-8"]
    assert rep["max_rel_diff"] <= 1e-8
    assert main(["bench", "--seed", "0", "--out", str(tmp_path / "b"), "--set", "bench.p=2",
                 "--set", "bench.T=10", "--set", "bench.n_obs=100", "--reps", "3"]) == 0
    assert json.loads((tmp_path / "b" / "bench.json").read_text())["agree_1e-8"]


def test_bench_single_region_no_aggregation_advantage():
    # about one sale per month: both filters do the same amount of work
    rep = run_bench(p=1, T=195, n_obs=195, reps=300, H=3, seed=1)
    assert rep["agree_1e-8"]
    assert 0.5 < rep["speedup"] < 2.0


def test_index_diag_predict(tmp_path):
    sim = _simulate(tmp_path)
    _, out = _fit(tmp_path, sim, "fit")
    arc = str(out / "archive.npz")
    assert main(["index", "--seed", "0", "--archive", arc, "--out", str(tmp_path / "idx")]) == 0
    with open(tmp_path / "idx" / "index.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["region_id", "month_index", "mean", "lo95", "hi95"]
    assert len(rows) - 1 == 4 * 12
    assert main(["diag", "--seed", "0", "--archive", arc, "--out", str(tmp_path / "dg")]) == 0
    rep = json.loads((tmp_path / "dg" / "diagnostics.json").read_text())
    assert {"sigma0_sq", "alpha", "K"} <= set(rep["psrf"])
    assert sum(k.startswith("x_T") for k in rep["psrf"]) == 4
    assert all(v is not None for v in rep["psrf"].values())
    empty = tmp_path / "empty.csv"
    empty.write_text("region_id,month_index,y,u_1\n")
    assert main(["predict", "--seed", "0", "--archive", arc, "--test", str(empty), "--out", str(tmp_path / "pr")]) == 0
    with open(tmp_path / "pr" / "predictions.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 and rows[0][:3] == ["region_id", "month_index", "y"]


def test_predict_outputs_rows(tmp_path):
    sim = _simulate(tmp_path)
    _, out = _fit(tmp_path, sim, "fit")
    test = tmp_path / "t.csv"
    test.write_text("region_id,month_index,y,u_1\nsim000,3,10.0,0.5\nsim002,11,-4.0,-1.0\n")
    assert main(["predict", "--seed", "0", "--archive", str(out / "archive.npz"), "--test", str(test),
                 "--out", str(tmp_path / "pr")]) == 0
    with open(tmp_path / "pr" / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert float(rows[0]["y_lo95"]) <= float(rows[0]["y_pred"]) <= float(rows[0]["y_hi95"])
    m = json.loads((tmp_path / "pr" / "metrics.json").read_text())
    assert m["price"]["n"] == 2


def test_exit_codes(tmp_path, capsys):
    assert main(["fit", "--out", str(tmp_path / "x")]) == EXIT_CONFIG  # no seed
    assert main(["fit", "--seed", "1", "--out", str(tmp_path / "x")]) == EXIT_CONFIG  # no data
    assert main(["fit", "--seed", "1", "--panel", str(tmp_path / "none.csv"), "--out", str(tmp_path / "x")]) == EXIT_DATA
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["simulate", "--seed", "1", "--set", "scenario.p=3", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    sim = _simulate(tmp_path)
    assert _fit(tmp_path, sim, "y", fit={"iterations": 10, "burn_in": 10})[0] == EXIT_CONFIG
    assert _fit(tmp_path, sim, "y", fit={"thin": 0})[0] == EXIT_CONFIG
    raw = tmp_path / "tx.csv"
    raw.write_text("region_id,price\nA,100\n")
    assert main(["fit", "--seed", "1", "--transactions", str(raw), "--out", str(tmp_path / "x")]) == EXIT_DATA
    capsys.readouterr()


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    import hyperlocal.cli as cli
    from hyperlocal.errors import NumericalError

    sim = _simulate(tmp_path)

    def boom(*a, **k):
        raise NumericalError("forced failure")

    monkeypatch.setattr(cli, "gibbs_sweep", boom)
    assert _fit(tmp_path, sim, "z")[0] == EXIT_NUMERICAL


def test_transactions_pipeline(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["region_id,sale_date,price,bathrooms,finished_sqft,lot_sqft"]
    for t in range(30):
        year, month = 1997 + t // 12, t % 12 + 1
        for r in ("A", "B"):
            for _ in range(3):
                rows.append(f"{r},{year}-{month:02d}-15,{200000 * np.exp(rng.normal(0, 0.1)):.0f},"
                            f"{rng.integers(1, 4)},{rng.uniform(800, 3000):.0f},{rng.uniform(2000, 9000):.0f}")
    raw = tmp_path / "tx.csv"
    raw.write_text("\n".join(rows) + "\n")
    cfg = _write(tmp_path / "c.json", {"seed": 2, "fit": {"chains": 2, "iterations": 20, "thin": 2}})
    out = tmp_path / "fit"
    assert main(["fit", "--config", cfg, "--transactions", str(raw), "--out", str(out)]) == 0
    assert (out / "trend.csv").exists() and (out / "archive.npz").exists()
