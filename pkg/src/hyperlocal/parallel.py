"""Exact parallel sweeps through auxiliary processor allocations.

Every region carries a worker id ``gamma_i``. Given the allocation the DP
splits into ``P`` independent DPs with concentration ``alpha / P``, so each
worker can resample the labels of its own regions without looking at the
others. A global Metropolis-Hastings step then moves whole clusters between
workers. Workers are logical shards; ``P`` is a model constant and results do
not depend on how many threads execute them.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import InvariantError, OwnershipError
from .ingest import StreamPanel, select_regions
from .sampler import (
    DEFAULT_OPTIONS,
    ModelState,
    SweepOptions,
    relabel,
    sample_alpha,
    sample_hyperparams,
    sample_sigma0,
    sample_x_eta,
    sample_z,
    sync_panel,
    read_checkpoint,
    update_params,
    write_checkpoint,
)


@dataclass
class ProcessorAllocation:
    P: int
    gamma: np.ndarray  # (p,) worker ids 0..P-1

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.int64)

    def owned(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.gamma == j)

    def loads(self) -> np.ndarray:
        return np.bincount(self.gamma, minlength=self.P)

    def copy(self) -> "ProcessorAllocation":
        return ProcessorAllocation(self.P, self.gamma.copy())


def init_allocation(p: int, P: int, rng: np.random.Generator, alpha: float = 1.0) -> ProcessorAllocation:
    """Draw ``phi ~ Dirichlet(alpha/P)`` then i.i.d. worker ids; ``phi`` is discarded."""
    if P == 1:
        return ProcessorAllocation(1, np.zeros(p, dtype=np.int64))
    phi = rng.dirichlet(np.full(P, alpha / P))
    return ProcessorAllocation(P, rng.choice(P, size=p, p=phi))


def cluster_workers(alloc: ProcessorAllocation, z) -> np.ndarray:
    """Worker of each cluster; raises if some cluster is split across workers."""
    z = np.asarray(z)
    K = int(z.max()) + 1
    owner = np.full(K, -1, dtype=np.int64)
    for k in range(K):
        w = np.unique(alloc.gamma[z == k])
        if len(w) != 1:
            raise InvariantError(f"cluster {k} spans workers {w.tolist()}")
        owner[k] = w[0]
    return owner


def conditional_allocation(z, P: int, rng: np.random.Generator) -> ProcessorAllocation:
    """Exact draw from ``p(gamma | z)``: every cluster to a uniform worker."""
    z = np.asarray(z)
    owner = rng.integers(0, P, int(z.max()) + 1)
    return ProcessorAllocation(P, owner[z])


def size_histogram(alloc: ProcessorAllocation, z) -> np.ndarray:
    """``a[s, j]`` = number of clusters of size ``s`` on worker ``j``."""
    z = np.asarray(z)
    owner = cluster_workers(alloc, z)
    sizes = np.bincount(z)
    hist = np.zeros((sizes.max() + 1, alloc.P), dtype=np.int64)
    np.add.at(hist, (sizes, owner), 1)
    if not np.array_equal((np.arange(len(hist))[:, None] * hist).sum(0), alloc.loads()):
        raise InvariantError("cluster size histogram disagrees with worker loads")
    return hist


def histogram_ratio(alloc: ProcessorAllocation, new: ProcessorAllocation, z) -> float:
    """``prod_j prod_s a_sj! / a*_sj!`` for a proposed reallocation."""
    a = size_histogram(alloc, z)
    b = size_histogram(new, z)
    n = max(len(a), len(b))
    a = np.pad(a, ((0, n - len(a)), (0, 0)))
    b = np.pad(b, ((0, n - len(b)), (0, 0)))
    return float(math.exp(gammaln(a + 1).sum() - gammaln(b + 1).sum()))


def log_joint_allocation(alloc: ProcessorAllocation, z, alpha: float) -> float:
    """``log p(gamma, z | alpha)`` with the worker weights integrated out.

    Dirichlet-multinomial for the loads times an independent CRP with
    concentration ``alpha / P`` on each worker.
    """
    z = np.asarray(z)
    cluster_workers(alloc, z)
    P, n = alloc.P, len(z)
    c = alpha / P
    loads = alloc.loads()
    out = gammaln(alpha) - gammaln(alpha + n) + float((gammaln(c + loads) - gammaln(c)).sum())
    for j in range(P):
        zj = z[alloc.gamma == j]
        if len(zj) == 0:
            continue
        sizes = np.bincount(zj)
        sizes = sizes[sizes > 0]
        out += len(sizes) * math.log(c) + gammaln(c) - gammaln(c + len(zj)) + float(gammaln(sizes).sum())
    return out


def global_reassign(alloc: ProcessorAllocation, z, rng: np.random.Generator, rule: str = "exact",
                    alpha: float = 1.0) -> tuple[ProcessorAllocation, bool]:
    """Propose a uniform worker for each cluster and accept or reject jointly.

    ``rule="exact"`` accepts with the ratio of :func:`log_joint_allocation`,
    which targets ``p(gamma | z)`` exactly. ``rule="histogram"`` uses the
    factorial ratio of the per-worker cluster-size histograms. Returns the
    new allocation and whether the move was accepted.
    """
    z = np.asarray(z)
    owner = cluster_workers(alloc, z)
    prop_owner = rng.integers(0, alloc.P, len(owner))
    prop = ProcessorAllocation(alloc.P, prop_owner[z])
    if rule == "exact":
        log_r = log_joint_allocation(prop, z, alpha) - log_joint_allocation(alloc, z, alpha)
    elif rule == "histogram":
        log_r = math.log(histogram_ratio(alloc, prop, z))
    else:
        raise ValueError(f"unknown reassignment rule {rule!r}")
    if math.log(rng.random()) < log_r:
        size_histogram(prop, z)
        return prop, True
    return alloc, False


# ---------------------------------------------------------------------------
# Shards
# ---------------------------------------------------------------------------


@dataclass
class WorkerShard:
    worker: int
    owned: np.ndarray       # global region indices
    state: ModelState       # local labels 0..K_j-1
    panel: StreamPanel


def split_state(state: ModelState, alloc: ProcessorAllocation, panel: StreamPanel) -> list[WorkerShard]:
    cluster_workers(alloc, state.z)
    shards = []
    for j in range(alloc.P):
        owned = alloc.owned(j)
        if len(owned) == 0:
            continue
        zl, old = relabel(state.z[owned])
        sub = ModelState(
            z=zl, x=state.x[:, owned].copy(), eta=state.eta[:, old].copy(),
            lam=state.lam[owned].copy(), a=state.a[owned].copy(), R=state.R[owned].copy(),
            beta=state.beta[owned].copy(), sigma0_sq=state.sigma0_sq, hyper=state.hyper, alpha=state.alpha,
        )
        sub_panel = sync_panel(select_regions(panel, owned), sub.beta)
        shards.append(WorkerShard(j, owned, sub, sub_panel))
    return shards


def merge_shards(state: ModelState, shards: list[WorkerShard]) -> ModelState:
    out = state.copy()
    offset = 0
    etas = []
    for sh in shards:
        s = sh.state
        out.z[sh.owned] = s.z + offset
        out.x[:, sh.owned] = s.x
        out.lam[sh.owned] = s.lam
        out.a[sh.owned] = s.a
        out.R[sh.owned] = s.R
        out.beta[sh.owned] = s.beta
        etas.append(s.eta)
        offset += s.K
    eta = np.concatenate(etas, axis=1) if etas else np.zeros((state.T, 0))
    out.z, old = relabel(out.z)
    out.eta = eta[:, old]
    return out


def local_sweep(shard: WorkerShard, alloc: ProcessorAllocation, rng: np.random.Generator,
                opts: SweepOptions = DEFAULT_OPTIONS) -> WorkerShard:
    """Labels and per-region parameters for one worker's regions.

    Concentration is ``alpha / P``; ``sigma0_sq`` and the hyperparameters are
    read but not updated.
    """
    if not np.all(alloc.gamma[shard.owned] == shard.worker):
        bad = shard.owned[alloc.gamma[shard.owned] != shard.worker]
        raise OwnershipError(f"worker {shard.worker} does not own region(s) {bad.tolist()}")
    s = shard.state.copy()
    panel = sync_panel(shard.panel, s.beta)
    if opts.update_z:
        s.z, s.lam = sample_z(s, panel, rng, opts, alpha=s.alpha / alloc.P)
        s.eta = np.zeros((s.T, s.K))
    s.x, s.eta = sample_x_eta(s, panel, rng, opts)
    panel = update_params(s, panel, rng, opts, shared=False)
    return WorkerShard(shard.worker, shard.owned, s, panel)


@dataclass
class PhaseTimes:
    local: float = 0.0
    global_: float = 0.0
    shared: float = 0.0
    accepted: int = 0
    proposed: int = 0
    sweeps: int = 0

    def as_dict(self) -> dict:
        return {"local_seconds": self.local, "global_seconds": self.global_, "shared_seconds": self.shared,
                "global_accept_rate": self.accepted / self.proposed if self.proposed else None,
                "sweeps": self.sweeps}


def worker_generators(rng: np.random.Generator, P: int) -> list[np.random.Generator]:
    """Per-worker streams from one root draw, spaced by PCG64 jumps."""
    seed = int(rng.integers(0, 2 ** 63))
    return [np.random.Generator(np.random.PCG64(seed).jumped(j)) for j in range(P)]


def parallel_sweep(state: ModelState, alloc: ProcessorAllocation, panel: StreamPanel,
                   rng: np.random.Generator, opts: SweepOptions = DEFAULT_OPTIONS,
                   executor: ThreadPoolExecutor | None = None, rule: str = "exact",
                   times: PhaseTimes | None = None) -> tuple[ModelState, ProcessorAllocation]:
    """Local phase on all workers, then global reassignment, then shared parameters.

    Phases are separated by barriers. ``executor`` runs the local phase
    concurrently; without one shards run in worker order. Results are the
    same either way.
    """
    times = times if times is not None else PhaseTimes()
    t0 = time.perf_counter()
    gens = worker_generators(rng, alloc.P)
    shards = split_state(state, alloc, panel)
    if executor is None:
        done = [local_sweep(sh, alloc, gens[sh.worker], opts) for sh in shards]
    else:
        futures = [executor.submit(local_sweep, sh, alloc, gens[sh.worker], opts) for sh in shards]
        done = [f.result() for f in futures]
    new = merge_shards(state, done)
    t1 = time.perf_counter()
    if alloc.P > 1:
        alloc, acc = global_reassign(alloc, new.z, rng, rule=rule, alpha=new.alpha)
        times.accepted += int(acc)
        times.proposed += 1
    t2 = time.perf_counter()
    if opts.update_sigma0:
        new.sigma0_sq = sample_sigma0(new, rng, opts)
    if opts.update_hyper:
        new.hyper = sample_hyperparams(new, rng)
    if opts.update_alpha:
        new.alpha = sample_alpha(new, rng)
    new.check()
    cluster_workers(alloc, new.z)
    t3 = time.perf_counter()
    times.local += t1 - t0
    times.global_ += t2 - t1
    times.shared += t3 - t2
    times.sweeps += 1
    return new, alloc


@dataclass
class ParallelChain:
    """Chain driven by :func:`parallel_sweep` with ``P`` logical workers."""

    state: ModelState
    alloc: ProcessorAllocation
    rng: np.random.Generator
    opts: SweepOptions = DEFAULT_OPTIONS
    threads: int = 1
    sweeps: int = 0
    times: PhaseTimes = field(default_factory=PhaseTimes)
    cfg_hash: str = ""

    def step(self, panel: StreamPanel, opts: SweepOptions | None = None) -> ModelState:
        if self.threads > 1 and self.alloc.P > 1:
            with ThreadPoolExecutor(max_workers=min(self.threads, self.alloc.P)) as ex:
                self.state, self.alloc = parallel_sweep(self.state, self.alloc, panel, self.rng,
                                                        opts or self.opts, ex, times=self.times)
        else:
            self.state, self.alloc = parallel_sweep(self.state, self.alloc, panel, self.rng,
                                                    opts or self.opts, times=self.times)
        self.sweeps += 1
        return self.state

    def save(self, path) -> None:
        extra = {"gamma": self.alloc.gamma.tolist(), "P": self.alloc.P, "phase_times": self.times.__dict__.copy()}
        write_checkpoint(path, self.state, self.rng, self.sweeps, self.cfg_hash, self.opts, extra)

    @classmethod
    def load(cls, path, cfg_hash: str | None = None, threads: int = 1) -> "ParallelChain":
        doc = read_checkpoint(path, cfg_hash)
        ex = doc["extra"]
        alloc = ProcessorAllocation(int(ex["P"]), np.asarray(ex["gamma"], dtype=np.int64))
        return cls(doc["state"], alloc, doc["rng"], doc["options"], threads, doc["sweeps"],
                   PhaseTimes(**ex["phase_times"]), doc["config_hash"])
