"""Deterministic toy inputs used by the test-suite and the README walkthrough.

``python -m hetplan.fixtures OUTDIR`` writes them as files.
"""
from __future__ import annotations

import json
import math
import sys
from pathlib import Path

from hetplan.core.types import ClusterSpec, ModelSpec, ParallelConfig
from hetplan.latency import ComputeProfile, ProfileEntry
from hetplan.memest import synthetic_samples, write_samples
from hetplan.topology import BandwidthMatrix, serialize_matrix, synth_topology

EFFECTIVE_FLOPS = 100e12
NVLINK_GBPS = 300.0


def toy_model() -> ModelSpec:
    return ModelSpec(n_layers=24, n_hidden=2048, n_heads=16, seq_len=1024, vocab_size=50257)


def toy_cluster() -> ClusterSpec:
    return ClusterSpec(n_nodes=4, gpus_per_node=4, mem_limit_per_gpu=16384.0, topology_id="toy4x4")


def toy_topology(seed: int = 7) -> BandwidthMatrix:
    return synth_topology(4, fast_bw=12.5, slow_bw=6.25, slow_fraction=0.25, intra_bw=NVLINK_GBPS, seed=seed)


def analytic_profile(model: ModelSpec, tps=(1, 2, 4, 8), bs_micros=(1, 2, 4, 8, 16, 32, 64)) -> ComputeProfile:
    """Roofline-style stand-in for profiled per-layer latencies.

    Compute: 72*h^2*s*b FLOPs per layer (fwd+bwd) at a fixed effective rate,
    split over tp with a 10% efficiency loss per doubling, plus a launch floor.
    TP comm: four ring all-reduces of the layer activation over NVLink.
    """
    h, s = model.n_hidden, model.seq_len
    entries = {}
    for tp in tps:
        eff = 1.1 ** math.log2(tp)
        for b in bs_micros:
            flops = 72.0 * h * h * s * b
            compute = 2e-4 + flops / EFFECTIVE_FLOPS / tp * eff
            msg = b * s * h * model.bytes_per_element
            comm = 4 * 2.0 * (tp - 1) / tp * msg / (NVLINK_GBPS * 1e9) if tp > 1 else 0.0
            entries[(tp, b)] = ProfileEntry(compute, comm)
    return ComputeProfile(entries)


def memory_training_models() -> list[ModelSpec]:
    return [
        ModelSpec(n_layers=L, n_hidden=h, n_heads=16, seq_len=1024, vocab_size=50257)
        for L in (16, 24, 32)
        for h in (1024, 1536, 2048, 2560)
    ]


def memory_training_set(noise: float = 0.0, seed: int = 0):
    """Labeled samples on 1-4 nodes of 4 GPUs, mirroring a small profiling campaign."""
    return synthetic_samples(memory_training_models(), [4, 8, 16], 4, [32, 64, 128], noise=noise, seed=seed)


SIX_NODE_NODES = "abcdef"
SIX_NODE_SLOW = ("ab", "bc", "de", "ad", "af", "be", "cd")


def six_node_topology(fast_bw: float = 20.0, slow_bw: float = 10.0) -> BandwidthMatrix:
    """Six single-GPU nodes; the listed pairs run at half speed in both directions.

    Alphabetical pipelines (a,b,c)/(d,e,f) and the stage-0 ring a<->d cross
    slow links, while e.g. (f,b,d)/(c,e,a) with ring f<->c is all-fast.
    """
    idx = {c: i for i, c in enumerate(SIX_NODE_NODES)}
    n = len(SIX_NODE_NODES)
    inter = [[fast_bw] * n for _ in range(n)]
    for a, b in SIX_NODE_SLOW:
        inter[idx[a]][idx[b]] = inter[idx[b]][idx[a]] = slow_bw
    return BandwidthMatrix(inter=tuple(tuple(r) for r in inter), intra=(NVLINK_GBPS,) * n)


def six_node_instance():
    """(conf, cluster, bw, profile, model) for pp=3, dp=2 on six nodes."""
    model = ModelSpec(n_layers=12, n_hidden=1024, n_heads=16, seq_len=1024, vocab_size=32000)
    cluster = ClusterSpec(n_nodes=6, gpus_per_node=1, mem_limit_per_gpu=32768.0, topology_id="six-node")
    conf = ParallelConfig.make(pp=3, tp=1, dp=2, bs_global=16, bs_micro=2)
    return conf, cluster, six_node_topology(), analytic_profile(model, tps=(1,)), model


def sa_instance(index: int):
    """Seeded 4-8 node instance with planted slow links (1 GPU per node)."""
    n = 4 + index % 5
    shapes = {4: (2, 2), 5: (5, 1), 6: (3, 2), 7: (7, 1), 8: (4, 2)}
    pp, dp = shapes[n]
    model = ModelSpec(n_layers=16, n_hidden=1024, n_heads=16, seq_len=1024, vocab_size=32000)
    cluster = ClusterSpec(n_nodes=n, gpus_per_node=1, mem_limit_per_gpu=32768.0)
    conf = ParallelConfig.make(pp=pp, tp=1, dp=dp, bs_global=8 * dp, bs_micro=2)
    bw = synth_topology(n, fast_bw=25.0, slow_bw=5.0, slow_fraction=0.3, intra_bw=NVLINK_GBPS, seed=1000 + index)
    return conf, cluster, bw, analytic_profile(model, tps=(1,)), model


def write_all(outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    model, cluster = toy_model(), toy_cluster()
    (outdir / "model.json").write_text(json.dumps(model.to_dict(), indent=2) + "\n")
    (outdir / "cluster.json").write_text(json.dumps(cluster.to_dict(), indent=2) + "\n")
    (outdir / "topology.csv").write_text(serialize_matrix(toy_topology()))
    (outdir / "profile.json").write_text(json.dumps(analytic_profile(model).to_dict(), indent=2) + "\n")
    (outdir / "mem_samples.csv").write_text(write_samples(memory_training_set()))
    (outdir / "six_node_topology.csv").write_text(serialize_matrix(six_node_topology()))
    sweep = ["pp,n_mb,compute,tp_comm,hop,dp_time"]
    for pp in (1, 2, 3, 4, 6, 8):
        for k in (1, 2, 4, 8):
            sweep.append(f"{pp},{pp * k},1.0,0.0,0.05,0.0")
    (outdir / "sweep.csv").write_text("\n".join(sweep) + "\n")


if __name__ == "__main__":
    write_all(Path(sys.argv[1] if len(sys.argv) > 1 else "fixtures"))
