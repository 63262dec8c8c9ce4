"""Discrete-event simulation of one pipeline-parallel training iteration.

Each stage executes its blocks in a fixed program order (1F1B or GPipe-style);
a block starts once the stage is free and its cross-stage dependency has
arrived. Communication only delays the dependency edge; it never occupies a
stage. Stages are 0-based here.
"""
from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from hetplan.errors import InputError

ONE_F_ONE_B = "1f1b"
GPIPE = "gpipe"
SCHEDULES = (ONE_F_ONE_B, GPIPE)

FWD, BWD, ALLREDUCE = "F", "B", "AR"


@dataclass(frozen=True)
class SimConfig:
    """Inputs of one simulation.

    ``hop_fwd[p][s]`` / ``hop_bwd[p][s]`` are the activation / gradient transfer
    times over the link between stages ``s`` and ``s + 1`` of pipeline ``p``.
    Every pipeline is simulated; the iteration ends when the slowest one has
    finished stage 0's last backward, followed by ``dp_time``.
    """

    pp: int
    n_mb: int
    fwd_time: float
    bwd_time: float
    hop_fwd: tuple[tuple[float, ...], ...] = ((),)
    hop_bwd: tuple[tuple[float, ...], ...] = ((),)
    dp_time: float = 0.0
    schedule: str = ONE_F_ONE_B
    conf: Any = None
    mapping: Any = None

    def __post_init__(self) -> None:
        if self.pp < 1 or self.n_mb < 1:
            raise InputError(f"need pp >= 1 and n_mb >= 1, got pp={self.pp}, n_mb={self.n_mb}")
        if self.fwd_time < 0 or self.bwd_time < 0 or self.dp_time < 0:
            raise InputError("block and all-reduce times must be non-negative")
        if self.schedule not in SCHEDULES:
            raise InputError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if len(self.hop_fwd) != len(self.hop_bwd) or not self.hop_fwd:
            raise InputError("hop_fwd and hop_bwd must describe the same, non-empty set of pipelines")
        for hops in (*self.hop_fwd, *self.hop_bwd):
            if len(hops) != self.pp - 1:
                raise InputError(f"each pipeline needs pp-1={self.pp - 1} hop times, got {len(hops)}")
            if any(h < 0 for h in hops):
                raise InputError("hop times must be non-negative")

    @classmethod
    def uniform(
        cls,
        pp: int,
        n_mb: int,
        fwd_time: float,
        bwd_time: float,
        hop: float = 0.0,
        dp_time: float = 0.0,
        schedule: str = ONE_F_ONE_B,
    ) -> "SimConfig":
        hops = (tuple([hop] * (pp - 1)),)
        return cls(pp, n_mb, fwd_time, bwd_time, hops, hops, dp_time, schedule)


@dataclass(frozen=True)
class Event:
    time: float
    end: float
    stage: int
    microbatch: int
    kind: str


@dataclass
class SimResult:
    makespan: float
    busy: list[float]
    idle: list[float]
    peak_inflight: list[int]
    trace: list[Event] = field(default_factory=list)
    critical_pipeline: int = 0

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "busy": self.busy,
            "idle": self.idle,
            "peak_inflight": self.peak_inflight,
            "critical_pipeline": self.critical_pipeline,
            "n_events": len(self.trace),
        }


def stage_program(schedule: str, pp: int, n_mb: int, stage: int) -> list[tuple[str, int]]:
    """Block order executed by ``stage``."""
    if schedule == GPIPE:
        return [(FWD, m) for m in range(n_mb)] + [(BWD, m) for m in range(n_mb)]
    warmup = min(pp - stage - 1, n_mb)
    prog = [(FWD, m) for m in range(warmup)]
    f, b = warmup, 0
    while f < n_mb:
        prog.append((FWD, f))
        f += 1
        prog.append((BWD, b))
        b += 1
    prog.extend((BWD, m) for m in range(b, n_mb))
    return prog


def _run_pipeline(
    sim: SimConfig, hop_fwd: Sequence[float], hop_bwd: Sequence[float]
) -> tuple[list[Event], list[int]]:
    pp, n_mb = sim.pp, sim.n_mb
    progs = [stage_program(sim.schedule, pp, n_mb, s) for s in range(pp)]
    pos = [0] * pp
    free = [0.0] * pp
    fwd_end = [[None] * n_mb for _ in range(pp)]
    bwd_end = [[None] * n_mb for _ in range(pp)]
    inflight = [0] * pp
    peak = [0] * pp
    events: list[Event] = []

    def ready_time(s: int) -> Optional[float]:
        kind, m = progs[s][pos[s]]
        if kind == FWD:
            if s == 0:
                return 0.0
            dep = fwd_end[s - 1][m]
            return None if dep is None else dep + hop_fwd[s - 1]
        if s == pp - 1:
            return fwd_end[s][m]
        dep = bwd_end[s + 1][m]
        return None if dep is None else dep + hop_bwd[s]

    # Event queue keyed by (start time, stage, microbatch, fwd flag) so that
    # ties resolve deterministically with backward before forward.
    heap: list[tuple[float, int, int, int]] = []
    queued = [False] * pp

    def try_queue(s: int) -> None:
        if queued[s] or pos[s] >= len(progs[s]):
            return
        r = ready_time(s)
        if r is None:
            return
        kind, m = progs[s][pos[s]]
        heapq.heappush(heap, (max(r, free[s]), s, m, 1 if kind == FWD else 0))
        queued[s] = True

    for s in range(pp):
        try_queue(s)
    while heap:
        start, s, m, is_fwd = heapq.heappop(heap)
        queued[s] = False
        kind = FWD if is_fwd else BWD
        dur = sim.fwd_time if is_fwd else sim.bwd_time
        end = start + dur
        events.append(Event(start, end, s, m, kind))
        free[s] = end
        pos[s] += 1
        if is_fwd:
            fwd_end[s][m] = end
            inflight[s] += 1
            peak[s] = max(peak[s], inflight[s])
        else:
            bwd_end[s][m] = end
            inflight[s] -= 1
        for t in (s - 1, s, s + 1):
            if 0 <= t < pp:
                try_queue(t)
    if any(p < len(prog) for p, prog in zip(pos, progs)):
        raise RuntimeError("pipeline schedule deadlocked")
    return events, peak


def _sort_key(e: Event) -> tuple:
    order = {BWD: 0, FWD: 1, ALLREDUCE: 2}
    return (e.time, e.stage, e.microbatch, order[e.kind])


def simulate(sim: SimConfig) -> SimResult:
    worst: Optional[tuple[float, int, list[Event], list[int]]] = None
    for p, (hf, hb) in enumerate(zip(sim.hop_fwd, sim.hop_bwd)):
        events, peak = _run_pipeline(sim, hf, hb)
        done = max(e.end for e in events if e.stage == 0 and e.kind == BWD)
        if worst is None or done > worst[0]:
            worst = (done, p, events, peak)
    assert worst is not None
    done, p, events, peak = worst
    busy = [0.0] * sim.pp
    for e in events:
        busy[e.stage] += e.end - e.time
    if sim.dp_time > 0:
        events.append(Event(done, done + sim.dp_time, 0, -1, ALLREDUCE))
    makespan = done + sim.dp_time
    events.sort(key=_sort_key)
    return SimResult(
        makespan=makespan,
        busy=busy,
        idle=[makespan - b for b in busy],
        peak_inflight=peak,
        trace=events,
        critical_pipeline=p,
    )


TRACE_HEADER = ("time", "stage", "microbatch", "kind", "duration")


def trace_export(result: SimResult) -> str:
    """CSV of the trace, one row per block, ordered by (time, stage, microbatch, B-before-F)."""
    if not result.trace:
        raise InputError("cannot export an empty trace")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for e in result.trace:
        w.writerow((repr(e.time), e.stage, e.microbatch, e.kind, repr(e.end - e.time)))
    return buf.getvalue()


def sim_config_for(
    conf,
    mapping,
    bw,
    profile,
    model,
    cluster,
    schedule: str = ONE_F_ONE_B,
    fwd_fraction: float = 1.0 / 3.0,
) -> SimConfig:
    """Build a simulation of a placed configuration from the same inputs as the closed form.

    Stage cost is C + T_TP split ``fwd_fraction`` : ``1 - fwd_fraction``; each
    (tensor rank, replica) pipeline gets its own directional hop times.
    """
    from hetplan.latency import message_sizes, stage_compute, t_dp_comm
    from hetplan.topology import GB

    if not 0.0 <= fwd_fraction <= 1.0:
        raise InputError(f"fwd_fraction must lie in [0, 1], got {fwd_fraction}")
    C, T_TP = stage_compute(profile, model, conf)
    msgs = message_sizes(model, conf)
    gpn = cluster.gpus_per_node
    hf, hb = [], []
    for z in range(conf.dp):
        for y in range(conf.tp):
            gpus = [mapping.gpu(x, y, z) for x in range(conf.pp)]
            hf.append(tuple(msgs.msg_pp / (bw.gpu_bw(a, b, gpn) * GB) for a, b in zip(gpus, gpus[1:])))
            hb.append(tuple(msgs.msg_pp / (bw.gpu_bw(b, a, gpn) * GB) for a, b in zip(gpus, gpus[1:])))
    stage = C + T_TP
    return SimConfig(
        pp=conf.pp,
        n_mb=conf.n_mb,
        fwd_time=stage * fwd_fraction,
        bwd_time=stage * (1.0 - fwd_fraction),
        hop_fwd=tuple(hf),
        hop_bwd=tuple(hb),
        dp_time=t_dp_comm(mapping, bw, msgs.msg_dp, conf, cluster),
        schedule=schedule,
        conf=conf,
        mapping=mapping,
    )
