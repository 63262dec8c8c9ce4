"""Top-level configuration search: enumerate, filter by memory, anneal placements, rank."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Union

import numpy as np

from hetplan.core.enumeration import divisors, factorizations
from hetplan.core.types import Candidate, ClusterSpec, ModelSpec, ParallelConfig, SearchResult
from hetplan.errors import InputError
from hetplan.latency import ComputeProfile
from hetplan.mapsearch import SaParams, sa_search
from hetplan.memest import DEFAULT_MARGIN, MemoryModel, is_runnable, predict_config
from hetplan.topology import BandwidthMatrix

log = logging.getLogger(__name__)

MemoryEstimator = Union[MemoryModel, Callable[[ModelSpec, ParallelConfig], float]]


def candidate_seed(master_seed: int, conf: ParallelConfig) -> int:
    """Per-candidate SA seed; independent of evaluation order."""
    ss = np.random.SeedSequence([master_seed, conf.pp, conf.tp, conf.dp, conf.bs_micro])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def enumerate_configs(model: ModelSpec, cluster: ClusterSpec, bs_global: int) -> list[ParallelConfig]:
    """Every (pp, tp, dp, bs_micro) candidate in canonical order."""
    out = []
    for pp, tp, dp in factorizations(cluster.n_gpus, cluster.gpus_per_node):
        if bs_global % dp or pp > model.n_layers:
            continue
        for bs_micro in divisors(bs_global // dp):
            out.append(ParallelConfig.make(pp, tp, dp, bs_global, bs_micro))
    return out


def _estimate(memory: MemoryEstimator, model: ModelSpec, conf: ParallelConfig) -> float:
    if isinstance(memory, MemoryModel):
        return predict_config(memory, model, conf)
    return float(memory(model, conf))


def _anneal(args) -> tuple:
    conf, cluster, bw, profile, model, params = args
    res = sa_search(conf, cluster, bw, profile, model, params)
    return res.mapping, res.latency, res.initial_latency, tuple(res.best_history)


def search(
    model: ModelSpec,
    cluster: ClusterSpec,
    bw: BandwidthMatrix,
    profile: ComputeProfile,
    memory: MemoryEstimator,
    bs_global: int,
    budget: SaParams,
    seed: int = 0,
    margin: float = DEFAULT_MARGIN,
    top_k: int = 10,
    workers: int = 1,
) -> SearchResult:
    """Find the fastest memory-feasible configuration and placement.

    Candidates whose estimated memory exceeds ``(1 - margin) * mem_limit`` are
    dropped before annealing. Results do not depend on ``workers``.
    """
    if bw.n_nodes != cluster.n_nodes:
        raise InputError(f"topology has {bw.n_nodes} nodes but cluster has {cluster.n_nodes}")
    if bs_global < 1:
        raise InputError(f"bs_global must be >= 1, got {bs_global}")
    if top_k < 1:
        raise InputError(f"top_k must be >= 1, got {top_k}")

    feasible: list[tuple[ParallelConfig, float]] = []
    evaluated = rejected = 0
    for conf in enumerate_configs(model, cluster, bs_global):
        evaluated += 1
        mem = _estimate(memory, model, conf)
        if not is_runnable(mem, cluster.mem_limit_per_gpu, margin):
            rejected += 1
            continue
        feasible.append((conf, mem))
    log.info("%d candidates, %d rejected as OOM", evaluated, rejected)

    jobs = [(conf, cluster, bw, profile, model, budget.with_seed(candidate_seed(seed, conf)))
            for conf, _ in feasible]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_anneal, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        outcomes = [_anneal(j) for j in jobs]

    ranked = []
    for (conf, mem), (mapping, latency, initial, history) in zip(feasible, outcomes):
        ranked.append(Candidate(conf, mapping, latency, mem, initial_latency=initial, best_history=history))
    ranked.sort(key=lambda c: (c.latency, c.conf.key))
    top = ranked[:top_k]
    return SearchResult(best=top[0] if top else None, top_k=top, rejected_oom=rejected, evaluated=evaluated)
