"""Command line entry point.

Every command reads an optional JSON config (``--config``); flags override
config keys and ``--set section.key=value`` overrides anything else. Each
run writes ``manifest.json`` into its output directory with the merged
config, its hash, the seed, package versions and wall-clock time.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, HyperlocalError, NumericalError, SchemaError
from .evaluate import ChainArchive, diagnostics, index_summary, metrics, predict_prices
from .ingest import (
    GlobalTrend,
    Schema,
    StreamPanel,
    detrend_and_bin,
    estimate_global_trend,
    parse_transactions,
)
from .parallel import PhaseTimes, ProcessorAllocation, conditional_allocation, parallel_sweep
from .sampler import (
    HyperParams,
    SweepOptions,
    config_hash,
    gibbs_sweep,
    init_state,
    read_checkpoint,
    write_checkpoint,
)
from .simulate import ScenarioConfig, TestSet, simulate_panel

logger = logging.getLogger("hyperlocal")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

DEFAULTS = {
    "seed": None,
    "out": "run",
    "scenario": {},
    "data": {"panel": None, "transactions": None, "trend": None, "T": None, "schema": {}},
    "fit": {
        "chains": 3, "iterations": 15000, "burn_in": None, "thin": 5, "workers": 1, "threads": 1,
        "checkpoint_every": 500, "init_partition": "singletons", "init_prior": "stationary",
        "init_var": 1.0, "cluster": True, "frozen_warmup": 0,
    },
    "hyper": {},
    "bench": {"p": 21, "T": 195, "n_obs": 16000, "reps": 1000, "H": 3},
    "predict": {"archive": None, "test": None, "trend": None, "draws_per_sample": 1},
    "diag": {"archive": None, "threshold": 1.1, "n_states": 5},
    "index": {"archive": None},
}


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for name, path in FLAG_KEYS.items():
        value = getattr(args, name, None)
        if value is not None and path is not None:
            _set_path(cfg, path, value)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        _set_path(cfg, key.strip(), _parse_value(val))
    if cfg.get("seed") is None:
        raise ConfigError("a seed is required (--seed or \"seed\" in the config)")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


FLAG_KEYS = {
    "seed": "seed", "out": "out",
    "panel": "data.panel", "transactions": "data.transactions", "trend": "data.trend", "T": "data.T",
    "chains": "fit.chains", "iterations": "fit.iterations", "burn_in": "fit.burn_in", "thin": "fit.thin",
    "workers": "fit.workers", "threads": "fit.threads", "checkpoint_every": "fit.checkpoint_every",
    "archive": None, "test": "predict.test", "reps": "bench.reps",
}


def _versions():
    import numba
    import scipy
    return {"hyperlocal": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(out: Path, command: str, cfg: dict, started: float, outputs: list, extra: dict | None = None):
    doc = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "versions": _versions(),
        "started_unix": started,
        "wall_clock_seconds": time.time() - started,
        "outputs": sorted(str(o) for o in outputs),
        "extra": extra or {},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=_jsonable)
    return doc


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: dict, out: Path) -> dict:
    scen = dict(cfg["scenario"])
    scen.setdefault("seed", cfg["seed"])
    sc = ScenarioConfig.from_dict(scen)
    panel, truth = simulate_panel(sc)
    panel.to_csv(out / "panel.csv")
    truth.to_json(out / "truth.json")
    with open(out / "scenario.json", "w") as fh:
        json.dump(sc.to_dict(), fh, indent=1)
    return {"outputs": ["panel.csv", "truth.json", "scenario.json"],
            "extra": {"p": panel.p, "T": panel.T, "n_obs": panel.n_obs}}


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def load_panel(cfg: dict, out: Path | None = None) -> tuple[StreamPanel, GlobalTrend | None]:
    data = cfg["data"]
    try:
        return _load_panel(data, out)
    except OSError as exc:
        raise DataError(f"cannot read input: {exc}") from exc


def _load_panel(data, out):
    if data.get("panel"):
        return StreamPanel.from_csv(data["panel"], T=data.get("T")), None
    if data.get("transactions"):
        schema = Schema(**data.get("schema", {}))
        tx = parse_transactions(data["transactions"], schema)
        if tx.rejects:
            logger.warning("%d transaction row(s) rejected", len(tx.rejects))
        T = data.get("T") or (int(tx.month.max()) + 1 if len(tx) else 0)
        g = GlobalTrend.from_csv(data["trend"]) if data.get("trend") else estimate_global_trend(tx, T, tx.H)
        if out is not None:
            g.to_csv(out / "trend.csv")
        return detrend_and_bin(tx, g), g
    raise ConfigError("fit needs data.panel or data.transactions")


def _fit_settings(cfg):
    f = cfg["fit"]
    iters, thin = int(f["iterations"]), int(f["thin"])
    burn = iters // 2 if f.get("burn_in") is None else int(f["burn_in"])
    if iters <= burn:
        raise ConfigError("iterations must exceed burn_in")
    if thin < 1:
        raise ConfigError("thin must be at least 1")
    if int(f["chains"]) < 1 or int(f["workers"]) < 1:
        raise ConfigError("chains and workers must be positive")
    opts = SweepOptions(init_prior=f["init_prior"], init_var=float(f["init_var"]), update_z=bool(f["cluster"]))
    return iters, burn, thin, opts


def _hyper(cfg, H):
    try:
        return HyperParams.with_constants(H, **cfg["hyper"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad hyperparameter settings: {exc}") from exc


def run_fit(cfg: dict, out: Path, panel: StreamPanel, stop_after: int | None = None, resume: bool = False):
    """Run (or resume) all chains; returns the archive and timing metadata."""
    iters, burn, thin, opts = _fit_settings(cfg)
    f = cfg["fit"]
    n_chains, P = int(f["chains"]), int(f["workers"])
    fit_hash = config_hash({k: cfg[k] for k in ("seed", "fit", "hyper", "data", "scenario")})
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    every = max(int(f["checkpoint_every"]), 1)
    frozen = int(f.get("frozen_warmup", 0))
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(n_chains)
    samples_all, meta_chains = [], []
    finished = True
    for c in range(n_chains):
        ck = ckdir / f"chain{c}.json"
        if resume and ck.exists():
            doc = read_checkpoint(ck, fit_hash)
            state, rng, done = doc["state"], doc["rng"], doc["sweeps"]
            extra = doc["extra"]
            samples = [_state_from_sample(s) for s in extra.get("samples", [])]
            alloc = ProcessorAllocation(P, extra["gamma"]) if P > 1 else None
            times = PhaseTimes(**extra.get("phase_times", {}))
            seconds = extra.get("sweep_seconds", 0.0)
        else:
            rng = np.random.default_rng(seeds[c])
            state = init_state(panel, rng, _hyper(cfg, panel.H), f["init_partition"], opts)
            alloc = conditional_allocation(state.z, P, rng) if P > 1 else None
            done, samples, times, seconds = 0, [], PhaseTimes(), 0.0
        executor = ThreadPoolExecutor(max_workers=min(int(f["threads"]), P)) if P > 1 and int(f["threads"]) > 1 else None
        try:
            while done < iters:
                if stop_after is not None and done >= stop_after:
                    finished = False
                    break
                sweep_opts = opts if done >= frozen else SweepOptions(
                    opts.init_prior, opts.init_var, update_z=False)
                t0 = time.perf_counter()
                if alloc is None:
                    state = gibbs_sweep(state, panel, rng, sweep_opts)
                else:
                    state, alloc = parallel_sweep(state, alloc, panel, rng, sweep_opts, executor, times=times)
                seconds += time.perf_counter() - t0
                done += 1
                if done > burn and (done - burn) % thin == 0:
                    samples.append(state.copy())
                if done % every == 0 or done == iters or (stop_after is not None and done >= stop_after):
                    extra = {"samples": [s.to_dict() for s in samples], "sweep_seconds": seconds,
                             "phase_times": times.__dict__.copy()}
                    if alloc is not None:
                        extra["gamma"] = alloc.gamma.tolist()
                    write_checkpoint(ck, state, rng, done, fit_hash, opts, extra)
        finally:
            if executor is not None:
                executor.shutdown()
        samples_all.append(samples)
        meta_chains.append({"chain": c, "sweeps": done, "sweep_seconds": seconds,
                            "phase_times": times.as_dict() if P > 1 else None})
    if not finished:
        return None, {"chains": meta_chains, "stopped": True}
    meta = {"config_hash": fit_hash, "seed": cfg["seed"], "workers": P, "region_ids": list(panel.region_ids),
            "iterations": iters, "burn_in": burn, "thin": thin, "chains": meta_chains}
    archive = ChainArchive.from_states(samples_all, meta)
    return archive, meta


def _state_from_sample(d):
    from .sampler import ModelState
    return ModelState.from_dict(d)


def cmd_fit(cfg: dict, out: Path, stop_after=None, resume=False) -> dict:
    panel, g = load_panel(cfg, out)
    archive, meta = run_fit(cfg, out, panel, stop_after, resume)
    if archive is None:
        return {"outputs": ["checkpoints"], "extra": meta}
    archive.save(out / "archive.npz")
    return {"outputs": ["archive.npz", "checkpoints"] + (["trend.csv"] if g is not None else []), "extra": meta}


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def bench_profile(p: int, T: int, n_obs: int, H: int, rng: np.random.Generator):
    """Synthetic one-cluster panel with roughly ``n_obs`` sales spread over ``p`` regions and ``T`` months."""
    from .ingest import build_panel
    from .ssm import ClusterView
    mean = n_obs / (p * T)
    counts = rng.poisson(mean, size=(T, p))
    month, region = np.nonzero(counts)
    reps = counts[month, region]
    month, region = np.repeat(month, reps), np.repeat(region, reps)
    n = len(month)
    u = rng.standard_normal((n, H))
    beta = rng.normal(0, 1, (p, H))
    y = rng.normal(0, 2, n) + np.einsum("nh,nh->n", u, beta[region])
    panel = build_panel(region, month, y, u, tuple(f"b{i}" for i in range(p)), T, beta=beta)
    view = ClusterView(np.arange(p), rng.uniform(0.5, 0.95, p), rng.normal(1.0, 0.2, p), 0.5,
                       rng.uniform(1.0, 3.0, p))
    return panel, view


def run_bench(p=21, T=195, n_obs=16000, reps=1000, H=3, seed=0) -> dict:
    from .ssm import cluster_loglik, filter_naive, filter_suffstat
    rng = np.random.default_rng(seed)
    panel, view = bench_profile(p, T, n_obs, H, rng)
    timings, values = {}, {}
    runs = {
        "naive": lambda: filter_naive(view, panel).loglik,
        "suffstat": lambda: filter_suffstat(view, panel, backend="numpy").loglik,
        "suffstat_compiled": lambda: cluster_loglik(view, panel),
    }
    for name, fn in runs.items():
        fn()  # warm-up (compilation, caches)
        vals = np.empty(reps)
        t0 = time.perf_counter()
        for r in range(reps):
            vals[r] = fn()
        timings[name] = time.perf_counter() - t0
        values[name] = vals
    rel = lambda a, b: float(np.max(np.abs(a - b) / np.abs(a)))
    return {
        "profile": {"p": p, "T": T, "n_obs": int(panel.n_obs), "H": H, "reps": reps},
        "seconds": timings,
        "speedup": timings["naive"] / timings["suffstat"],
        "speedup_compiled": timings["naive"] / timings["suffstat_compiled"],
        "max_rel_diff": rel(values["naive"], values["suffstat"]),
        "max_rel_diff_compiled": rel(values["naive"], values["suffstat_compiled"]),
        "agree_1e-8": rel(values["naive"], values["suffstat"]) <= 1e-8
        and rel(values["naive"], values["suffstat_compiled"]) <= 1e-8,
        "loglik": float(values["naive"][0]),
    }


def cmd_bench(cfg: dict, out: Path) -> dict:
    b = cfg["bench"]
    report = run_bench(int(b["p"]), int(b["T"]), int(b["n_obs"]), int(b["reps"]), int(b["H"]), cfg["seed"])
    with open(out / "bench.json", "w") as fh:
        json.dump(report, fh, indent=1)
    print(json.dumps(report, indent=1))
    return {"outputs": ["bench.json"], "extra": {"speedup": report["speedup"]}}


# ---------------------------------------------------------------------------
# index / predict / diag
# ---------------------------------------------------------------------------


def _archive(cfg, section):
    path = cfg[section].get("archive")
    if not path:
        raise ConfigError(f"{section} needs an archive path (--archive)")
    try:
        return ChainArchive.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from exc


def cmd_index(cfg: dict, out: Path) -> dict:
    arc = _archive(cfg, "index")
    summ = index_summary(arc)
    ids = arc.meta.get("region_ids") or [str(i) for i in range(arc.p)]
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "month_index", "mean", "lo95", "hi95"])
        for i, rid in enumerate(ids):
            for t in range(arc.T):
                w.writerow([rid, t, repr(float(summ.mean[t, i])), repr(float(summ.lo95[t, i])),
                            repr(float(summ.hi95[t, i]))])
    with open(out / "cooccurrence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id"] + list(ids))
        for i, rid in enumerate(ids):
            w.writerow([rid] + [repr(float(v)) for v in summ.cooccurrence[i]])
    return {"outputs": ["index.csv", "cooccurrence.csv"], "extra": {"rows": arc.p * arc.T}}


PRED_HEADER = ["region_id", "month_index", "y", "y_pred", "y_lo95", "y_hi95", "price_pred", "price_lo95", "price_hi95"]


def cmd_predict(cfg: dict, out: Path) -> dict:
    arc = _archive(cfg, "predict")
    pc = cfg["predict"]
    if not pc.get("test"):
        raise ConfigError("predict needs a test-set CSV (--test)")
    ids = arc.meta.get("region_ids") or [str(i) for i in range(arc.p)]
    try:
        test = TestSet.from_csv(pc["test"], ids)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read test set {pc['test']}: {exc}") from exc
    g = GlobalTrend.from_csv(pc["trend"]) if pc.get("trend") else None
    rng = np.random.default_rng(cfg["seed"])
    pred = predict_prices(arc, test, g, rng, int(pc.get("draws_per_sample", 1)))
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRED_HEADER)
        for j in range(len(test)):
            w.writerow([ids[test.region[j]], int(test.month[j]), repr(float(test.y[j]))]
                       + [repr(float(v[j])) for v in (pred.y_mean, pred.y_lo, pred.y_hi, pred.price,
                                                       pred.price_lo, pred.price_hi)])
    gt = np.ones(len(test)) if g is None else g.g[test.month]
    truth_price = gt * np.exp(test.y / 200.0)
    report = {"price": metrics(pred.price, truth_price), "y": metrics(pred.y_mean, test.y) if len(test) else None,
              "coverage95_y": float(np.mean((test.y >= pred.y_lo) & (test.y <= pred.y_hi))) if len(test) else None}
    with open(out / "metrics.json", "w") as fh:
        json.dump(report, fh, indent=1)
    return {"outputs": ["predictions.csv", "metrics.json"], "extra": {"n_test": len(test)}}


def cmd_diag(cfg: dict, out: Path) -> dict:
    arc = _archive(cfg, "diag")
    d = cfg["diag"]
    report = diagnostics(arc, float(d["threshold"]), int(d["n_states"]), cfg["seed"])
    report["config_hash"] = arc.meta.get("config_hash")
    with open(out / "diagnostics.json", "w") as fh:
        json.dump(report, fh, indent=1)
    return {"outputs": ["diagnostics.json"], "extra": {"converged": report["converged"]}}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyperlocal", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        return p

    common(sub.add_parser("simulate", help="generate a synthetic panel and its ground truth"))
    fit = common(sub.add_parser("fit", help="run MCMC chains on a panel"))
    fit.add_argument("--panel", help="panel CSV (region_id, month_index, y, u_1..u_H)")
    fit.add_argument("--transactions", help="raw transaction CSV")
    fit.add_argument("--trend", help="global trend CSV to reuse instead of estimating")
    fit.add_argument("--T", type=int, help="number of months")
    fit.add_argument("--chains", type=int)
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--burn-in", dest="burn_in", type=int)
    fit.add_argument("--thin", type=int)
    fit.add_argument("--workers", type=int, help="logical worker count P")
    fit.add_argument("--threads", type=int, help="threads executing the workers")
    fit.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    fit.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")
    fit.add_argument("--stop-after", dest="stop_after", type=int, help="stop each chain after this many sweeps")
    bench = common(sub.add_parser("bench", help="time naive vs sufficient-statistic likelihoods"))
    bench.add_argument("--reps", type=int)
    for name, helptext in (("index", "posterior index bands"), ("diag", "convergence diagnostics")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--archive")
    pred = common(sub.add_parser("predict", help="posterior predictive prices for a test set"))
    pred.add_argument("--archive")
    pred.add_argument("--test")
    pred.add_argument("--trend", dest="pred_trend")
    return ap


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "bench": cmd_bench,
            "index": cmd_index, "predict": cmd_predict, "diag": cmd_diag}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = load_config(args)
        if getattr(args, "archive", None):
            _set_path(cfg, f"{args.command}.archive", args.archive)
        if getattr(args, "pred_trend", None):
            _set_path(cfg, "predict.trend", args.pred_trend)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "fit":
            result = cmd_fit(cfg, out, args.stop_after, args.resume)
        else:
            result = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, started, result["outputs"], result.get("extra"))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HyperlocalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
