"""Simulated annealing over slot permutations, minimizing the refined latency model."""
from __future__ import annotations

import math
import random
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from hetplan.core.types import ClusterSpec, ModelSpec, ParallelConfig
from hetplan.errors import InputError
from hetplan.latency import ComputeProfile, SlotObjective
from hetplan.mapsearch.mapping import MOVES, WorkerMapping, initial_mapping, random_move
from hetplan.topology import BandwidthMatrix

CALIBRATION_MOVES = 100
CALIBRATION_ACCEPT = 0.8


@dataclass(frozen=True)
class SaParams:
    """Annealing budget and schedule.

    Exactly one of ``iterations`` / ``wall_seconds`` sets the budget; only the
    iteration budget is reproducible. ``t_init=None`` self-calibrates.
    """

    iterations: Optional[int] = 2000
    wall_seconds: Optional[float] = None
    alpha: float = 0.999
    t_init: Optional[float] = None
    seed: int = 0
    move_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self) -> None:
        if (self.iterations is None) == (self.wall_seconds is None):
            raise InputError("set exactly one of iterations / wall_seconds")
        if self.iterations is not None and self.iterations < 1:
            raise InputError(f"iterations must be >= 1, got {self.iterations}")
        if self.wall_seconds is not None and not self.wall_seconds > 0:
            raise InputError(f"wall_seconds must be > 0, got {self.wall_seconds}")
        if not 0.0 < self.alpha < 1.0:
            raise InputError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.t_init is not None and not self.t_init > 0:
            raise InputError(f"t_init must be > 0, got {self.t_init}")
        w = self.move_weights
        if len(w) != len(MOVES) or any(v < 0 for v in w) or abs(sum(w) - 1.0) > 1e-9:
            raise InputError(f"move_weights must be {len(MOVES)} non-negative numbers summing to 1, got {w}")

    def with_seed(self, seed: int) -> "SaParams":
        return SaParams(self.iterations, self.wall_seconds, self.alpha, self.t_init, seed, self.move_weights)


@dataclass
class SaResult:
    mapping: WorkerMapping
    latency: float
    initial_latency: float
    history: list[float] = field(default_factory=list)  # objective after each accepted move
    best_history: list[float] = field(default_factory=list)  # best-ever, one per iteration
    t_init: float = 0.0
    iterations: int = 0
    accepted: int = 0


def _pick_move(rng: random.Random, weights: Sequence[float]) -> str:
    r = rng.random()
    acc = 0.0
    for kind, w in zip(MOVES, weights):
        acc += w
        if r < acc:
            return kind
    return MOVES[-1]


def calibrate_temperature(
    objective: Callable[[Sequence[int]], float],
    perm: Sequence[int],
    rng: random.Random,
    weights: Sequence[float],
    n_moves: int = CALIBRATION_MOVES,
) -> float:
    """Temperature at which the median uphill step of random moves is accepted with p=0.8."""
    base = objective(perm)
    deltas = []
    for _ in range(n_moves):
        cand = random_move(perm, _pick_move(rng, weights), rng)
        deltas.append(abs(objective(cand) - base))
    med = statistics.median(deltas) if deltas else 0.0
    if med == 0.0:
        nonzero = [d for d in deltas if d > 0]
        if not nonzero:
            return 1.0
        med = statistics.median(nonzero)
    return -med / math.log(CALIBRATION_ACCEPT)


def sa_search(
    conf: ParallelConfig,
    cluster: ClusterSpec,
    bw: BandwidthMatrix,
    profile: ComputeProfile,
    model: ModelSpec,
    params: SaParams,
    on_step: Optional[Callable[[WorkerMapping], None]] = None,
) -> SaResult:
    """Anneal the placement of ``conf`` starting from the alphabetical mapping.

    ``on_step`` (testing hook) receives every candidate mapping that is evaluated.
    """
    start = initial_mapping(conf, cluster)
    objective = SlotObjective(conf, bw, profile, model, cluster)
    rng = random.Random(params.seed)
    cur = list(start.slots())
    cur_obj = objective(cur)
    best, best_obj = list(cur), cur_obj
    temp = params.t_init if params.t_init is not None else calibrate_temperature(
        objective, cur, rng, params.move_weights
    )
    result = SaResult(mapping=start, latency=cur_obj, initial_latency=cur_obj, t_init=temp)
    deadline = None if params.wall_seconds is None else time.monotonic() + params.wall_seconds
    shape = (conf.pp, conf.tp, conf.dp, cluster.gpus_per_node)

    it = 0
    while True:
        if params.iterations is not None:
            if it >= params.iterations:
                break
        elif time.monotonic() >= deadline:
            break
        it += 1
        cand = random_move(cur, _pick_move(rng, params.move_weights), rng)
        if on_step is not None:
            on_step(WorkerMapping.from_slots(cand, *shape))
        obj = objective(cand)
        delta = obj - cur_obj
        if delta <= 0 or rng.random() < math.exp(-delta / temp):
            cur, cur_obj = cand, obj
            result.history.append(obj)
            result.accepted += 1
            if obj < best_obj:
                best, best_obj = list(cand), obj
        result.best_history.append(best_obj)
        temp *= params.alpha

    result.mapping = WorkerMapping.from_slots(best, *shape)
    result.latency = best_obj
    result.iterations = it
    return result


def history_csv(result: SaResult) -> str:
    """One row per iteration: best-ever objective so far."""
    lines = ["iteration,best_latency"]
    lines += [f"{i},{v!r}" for i, v in enumerate(result.best_history, start=1)]
    return "\n".join(lines) + "\n"
