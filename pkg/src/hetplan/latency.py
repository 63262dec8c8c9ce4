"""Closed-form iteration latency models.

Two models are provided:

* the refined 1F1B model (:func:`t_iteration`): bubbles repeat ``n_mb / pp``
  times, plus a straggler tail and the stage-0 data-parallel all-reduce;
* the prior-art model (:func:`t_prev`) that treats the pipeline as one bubble
  plus ``n_mb - 1`` straggler blocks and uses nominal link bandwidths.

All times are seconds, message sizes bytes, bandwidths GB/s.
"""
from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Sequence

from hetplan.core.types import ClusterSpec, ModelSpec, ParallelConfig
from hetplan.errors import ConfigurationError, InputError
from hetplan.topology import GB, BandwidthMatrix

if TYPE_CHECKING:
    from hetplan.mapsearch.mapping import WorkerMapping


@dataclass(frozen=True)
class ProfileEntry:
    compute_per_layer: float  # forward + backward, one microbatch
    tp_comm_per_layer: float


class ComputeProfile:
    """Per-layer compute and TP all-reduce latency keyed by (tp, bs_micro).

    Missing keys are filled by interpolating log(latency) linearly in
    log(bs_micro) and log(tp) between the nearest profiled keys; queries
    outside the profiled range take the boundary value.
    """

    def __init__(self, entries: dict[tuple[int, int], ProfileEntry]):
        for (tp, bs), e in entries.items():
            if tp < 1 or bs < 1:
                raise InputError(f"profile key (tp={tp}, bs_micro={bs}) must be positive")
            if not (math.isfinite(e.compute_per_layer) and e.compute_per_layer > 0):
                raise InputError(f"compute latency at (tp={tp}, bs_micro={bs}) must be > 0")
            if not (math.isfinite(e.tp_comm_per_layer) and e.tp_comm_per_layer >= 0):
                raise InputError(f"tp comm latency at (tp={tp}, bs_micro={bs}) must be >= 0")
        self.entries = dict(sorted(entries.items()))
        self._rows: dict[int, list[int]] = {}
        for tp, bs in self.entries:
            self._rows.setdefault(tp, []).append(bs)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ComputeProfile) and self.entries == other.entries

    def lookup(self, tp: int, bs_micro: int) -> ProfileEntry:
        if not self.entries:
            raise ConfigurationError("compute profile is empty")
        hit = self.entries.get((tp, bs_micro))
        if hit is not None:
            return hit
        tps = sorted(self._rows)
        t0, t1, wt = _bracket(tps, tp)
        e0 = self._lookup_row(t0, bs_micro)
        if t1 == t0:
            return e0
        e1 = self._lookup_row(t1, bs_micro)
        return ProfileEntry(
            _log_interp(e0.compute_per_layer, e1.compute_per_layer, wt),
            _log_interp(e0.tp_comm_per_layer, e1.tp_comm_per_layer, wt),
        )

    def _lookup_row(self, tp: int, bs_micro: int) -> ProfileEntry:
        b0, b1, wb = _bracket(self._rows[tp], bs_micro)
        e0 = self.entries[(tp, b0)]
        if b1 == b0:
            return e0
        e1 = self.entries[(tp, b1)]
        return ProfileEntry(
            _log_interp(e0.compute_per_layer, e1.compute_per_layer, wb),
            _log_interp(e0.tp_comm_per_layer, e1.tp_comm_per_layer, wb),
        )

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"tp": tp, "bs_micro": bs, "compute_per_layer": e.compute_per_layer,
                 "tp_comm_per_layer": e.tp_comm_per_layer}
                for (tp, bs), e in self.entries.items()
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComputeProfile":
        try:
            entries = {
                (int(r["tp"]), int(r["bs_micro"])): ProfileEntry(float(r["compute_per_layer"]),
                                                                float(r.get("tp_comm_per_layer", 0.0)))
                for r in d["entries"]
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed compute profile: {exc}") from None
        return cls(entries)


def _bracket(keys: Sequence[int], q: int) -> tuple[int, int, float]:
    """Nearest keys around ``q`` and the interpolation weight in log space (clamped)."""
    if q <= keys[0]:
        return keys[0], keys[0], 0.0
    if q >= keys[-1]:
        return keys[-1], keys[-1], 0.0
    i = bisect_left(keys, q)
    if keys[i] == q:
        return q, q, 0.0
    lo, hi = keys[i - 1], keys[i]
    return lo, hi, (math.log(q) - math.log(lo)) / (math.log(hi) - math.log(lo))


def _log_interp(v0: float, v1: float, w: float) -> float:
    if v0 <= 0 or v1 <= 0:
        return v0 + w * (v1 - v0)
    return math.exp(math.log(v0) + w * (math.log(v1) - math.log(v0)))


@dataclass(frozen=True)
class MessageSizes:
    msg_pp: float  # bytes, activation of one microbatch between adjacent stages
    msg_dp: float  # bytes, gradient shard held by one stage-0 worker


@dataclass(frozen=True)
class LatencyBreakdown:
    t_bubble: float
    t_straggler: float
    t_pp: float  # slowest pipeline's summed hop cost
    t_dp: float
    t_total: float
    pp: int
    n_mb: int
    compute: float
    tp_comm: float
    msg_pp: float
    msg_dp: float

    def to_dict(self) -> dict:
        return asdict(self)


def stage_compute(profile: ComputeProfile, model: ModelSpec, conf: ParallelConfig) -> tuple[float, float]:
    """(C, T_TP) of the largest stage, i.e. ceil(n_layers / pp) layers."""
    if not len(profile):
        raise ConfigurationError("compute profile is empty")
    if model.n_layers < conf.pp:
        raise ConfigurationError(f"n_layers={model.n_layers} < pp={conf.pp}")
    layers = -(-model.n_layers // conf.pp)
    e = profile.lookup(conf.tp, conf.bs_micro)
    return layers * e.compute_per_layer, layers * e.tp_comm_per_layer


def message_sizes(model: ModelSpec, conf: ParallelConfig) -> MessageSizes:
    msg_pp = conf.bs_micro * model.seq_len * model.n_hidden * model.bytes_per_element
    msg_dp = model.n_params / (conf.pp * conf.tp) * model.bytes_per_element
    return MessageSizes(float(msg_pp), float(msg_dp))


def t_bubble(pp: int, C: float, T_TP: float, t_pp: float) -> float:
    return pp * (C + T_TP) + (pp - 1) * t_pp


def t_straggler(pp: int, C: float, T_TP: float) -> float:
    return (pp - 1) * (C + T_TP)


def t_pp_comm(mapping: "WorkerMapping", bw: BandwidthMatrix, msg_pp: float, conf: ParallelConfig) -> float:
    """Summed forward+backward hop time of the slowest end-to-end pipeline."""
    gpn = mapping.gpus_per_node
    worst = 0.0
    for z in range(conf.dp):
        for y in range(conf.tp):
            total = 0.0
            for x in range(conf.pp - 1):
                b = bw.gpu_bw(mapping.gpu(x, y, z), mapping.gpu(x + 1, y, z), gpn)
                total += 2.0 * msg_pp / (b * GB)
            worst = max(worst, total)
    return worst


def _ring_term(factor: float, size: int, msg: float, min_bw: float) -> float:
    if size <= 1:
        return 0.0
    return factor * (size - 1) * msg / (size * min_bw * GB)


def t_dp_comm(
    mapping: "WorkerMapping",
    bw: BandwidthMatrix,
    msg_dp: float,
    conf: ParallelConfig,
    cluster: ClusterSpec,
) -> float:
    """Hierarchical-ring all-reduce of stage 0's replicas.

    Intra phase: the co-located replicas of each node (the largest such
    group dominates). Inter phase: one ring across the distinct nodes, limited
    by the slowest directed link among them.
    """
    gpn = cluster.gpus_per_node
    intra_worst = 0.0
    inter_worst = 0.0
    for y in range(conf.tp):
        per_node: dict[int, int] = {}
        for z in range(conf.dp):
            node = mapping.gpu(0, y, z) // gpn
            per_node[node] = per_node.get(node, 0) + 1
        for node, k in per_node.items():
            intra_worst = max(intra_worst, _ring_term(4.0, k, msg_dp, bw.intra[node]))
        nodes = sorted(per_node)
        if len(nodes) > 1:
            min_bw = min(bw.inter[a][b] for a in nodes for b in nodes if a != b)
            inter_worst = max(inter_worst, _ring_term(2.0, len(nodes), msg_dp, min_bw))
    return intra_worst + inter_worst


def refined_total(pp: int, n_mb: int, C: float, T_TP: float, t_pp: float, t_dp: float) -> tuple[float, float, float]:
    """(t_bubble, t_straggler, t_total) of the refined model from scalar terms.

    ``t_pp`` is the slowest pipeline's summed hop cost; the bubble's
    ``(pp - 1)`` communication factor applies to its per-hop average.
    """
    hop = t_pp / (pp - 1) if pp > 1 else 0.0
    bubble = t_bubble(pp, C, T_TP, hop)
    straggler = t_straggler(pp, C, T_TP)
    return bubble, straggler, bubble * (n_mb / pp) + straggler + t_dp


def prev_total(pp: int, n_mb: int, C: float, T_TP: float, t_pp: float, t_dp: float) -> float:
    """Prior-art model from scalar terms; ``t_pp`` as in :func:`refined_total`."""
    hop = t_pp / (pp - 1) if pp > 1 else 0.0
    return (n_mb - 1) * (C + T_TP) + pp * (C + T_TP) + (pp - 1) * hop + t_dp


def t_iteration(
    conf: ParallelConfig,
    mapping: "WorkerMapping",
    bw: BandwidthMatrix,
    profile: ComputeProfile,
    model: ModelSpec,
    cluster: ClusterSpec,
) -> LatencyBreakdown:
    C, T_TP = stage_compute(profile, model, conf)
    msgs = message_sizes(model, conf)
    tpp = t_pp_comm(mapping, bw, msgs.msg_pp, conf)
    tdp = t_dp_comm(mapping, bw, msgs.msg_dp, conf, cluster)
    bubble, straggler, total = refined_total(conf.pp, conf.n_mb, C, T_TP, tpp, tdp)
    return LatencyBreakdown(
        t_bubble=bubble, t_straggler=straggler, t_pp=tpp, t_dp=tdp, t_total=total,
        pp=conf.pp, n_mb=conf.n_mb, compute=C, tp_comm=T_TP,
        msg_pp=msgs.msg_pp, msg_dp=msgs.msg_dp,
    )


def t_prev(
    conf: ParallelConfig,
    bw: BandwidthMatrix,
    profile: ComputeProfile,
    model: ModelSpec,
    cluster: ClusterSpec,
) -> float:
    """Prior-art estimate: alphabetical placement at the best measured bandwidth of each link class."""
    from hetplan.mapsearch.mapping import initial_mapping

    nominal = bw.nominal()
    mapping = initial_mapping(conf, cluster)
    C, T_TP = stage_compute(profile, model, conf)
    msgs = message_sizes(model, conf)
    tpp = t_pp_comm(mapping, nominal, msgs.msg_pp, conf)
    tdp = t_dp_comm(mapping, nominal, msgs.msg_dp, conf, cluster)
    return prev_total(conf.pp, conf.n_mb, C, T_TP, tpp, tdp)


class SlotObjective:
    """Fast evaluator of the refined model over slot permutations.

    Equivalent to ``t_iteration(...).t_total`` for slot-aligned mappings; all
    mapping-independent terms are computed once.
    """

    def __init__(
        self,
        conf: ParallelConfig,
        bw: BandwidthMatrix,
        profile: ComputeProfile,
        model: ModelSpec,
        cluster: ClusterSpec,
    ):
        if bw.n_nodes != cluster.n_nodes:
            raise InputError(f"topology has {bw.n_nodes} nodes, cluster has {cluster.n_nodes}")
        conf.check_cluster(cluster)
        self.conf = conf
        self.C, self.T_TP = stage_compute(profile, model, conf)
        self.msgs = message_sizes(model, conf)
        tp, gpn = conf.tp, cluster.gpus_per_node
        n_slots = conf.pp * conf.dp
        self.node_of_slot = [s * tp // gpn for s in range(n_slots)]
        nos = self.node_of_slot
        self.hop = [
            [2.0 * self.msgs.msg_pp / (bw.inter[nos[a]][nos[b]] * GB) for b in range(n_slots)]
            for a in range(n_slots)
        ]
        self.bw = bw

    def terms(self, perm: Sequence[int]) -> tuple[float, float]:
        pp, dp = self.conf.pp, self.conf.dp
        hop = self.hop
        tpp = 0.0
        for z in range(dp):
            base = z * pp
            total = 0.0
            for x in range(base, base + pp - 1):
                total += hop[perm[x]][perm[x + 1]]
            if total > tpp:
                tpp = total
        tdp = 0.0
        if dp > 1:
            nos = self.node_of_slot
            per_node: dict[int, int] = {}
            for z in range(dp):
                n = nos[perm[z * pp]]
                per_node[n] = per_node.get(n, 0) + 1
            msg = self.msgs.msg_dp
            intra = max(_ring_term(4.0, k, msg, self.bw.intra[n]) for n, k in per_node.items())
            inter = 0.0
            if len(per_node) > 1:
                nodes = list(per_node)
                inter_bw = self.bw.inter
                min_bw = min(inter_bw[a][b] for a in nodes for b in nodes if a != b)
                inter = _ring_term(2.0, len(nodes), msg, min_bw)
            tdp = intra + inter
        return tpp, tdp

    def __call__(self, perm: Sequence[int]) -> float:
        tpp, tdp = self.terms(perm)
        return refined_total(self.conf.pp, self.conf.n_mb, self.C, self.T_TP, tpp, tdp)[2]
