"""Acceptance gate: one test per primary criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import random
import time
from pathlib import Path

from oracles import brute_force_slots

from hetplan import memest
from hetplan.cli import main as cli_main
from hetplan.core import ClusterSpec, ModelSpec, ParallelConfig, divisors, factorizations
from hetplan.fixtures import memory_training_set, sa_instance, six_node_instance, toy_cluster, toy_model
from hetplan.latency import (
    message_sizes,
    prev_total,
    refined_total,
    t_bubble,
    t_dp_comm,
    t_iteration,
    t_pp_comm,
    t_straggler,
)
from hetplan.mapsearch import SaParams, WorkerMapping, initial_mapping, migrate, reverse, sa_search, swap
from hetplan.schedsim import GPIPE, ONE_F_ONE_B, SimConfig, simulate
from hetplan.topology import BandwidthMatrix, parse_matrix, synth_topology

RESULTS: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line)


def mape(est, ref):
    return sum(abs(e - r) / r for e, r in zip(est, ref)) / len(ref) * 100.0


def sweep_rows(hop: float):
    """(pp, n_mb, t_refined, t_prev, sim) on the homogeneous sweep; f = b = C/2 with C = 1."""
    rows = []
    for pp in (1, 2, 3, 4, 6, 8):
        for k in (1, 2, 4, 8):
            n_mb = pp * k
            t_pp = 2.0 * hop * (pp - 1)
            refined = refined_total(pp, n_mb, 1.0, 0.0, t_pp, 0.0)[2]
            prev = prev_total(pp, n_mb, 1.0, 0.0, t_pp, 0.0)
            sim = simulate(SimConfig.uniform(pp, n_mb, 0.5, 0.5, hop=hop)).makespan
            rows.append((pp, n_mb, refined, prev, sim))
    return rows


def test_latency_model_oracle():
    t0 = time.perf_counter()
    rows = sweep_rows(0.0)
    small = [abs(r - s) / s for pp, _, r, _, s in rows if pp <= 2]
    m_ref = mape([r[2] for r in rows], [r[4] for r in rows])
    m_prev = mape([r[3] for r in rows], [r[4] for r in rows])
    # same sweep with communication enabled, where the hidden critical path shows up
    comm = sweep_rows(0.05)
    c_ref = mape([r[2] for r in comm], [r[4] for r in comm])
    c_prev = mape([r[3] for r in comm], [r[4] for r in comm])
    elapsed = time.perf_counter() - t0

    exact_ok = max(small) < 1e-9
    mape_ok = m_ref <= 10.0
    strict_ok = m_prev > m_ref
    ok = exact_ok and mape_ok and strict_ok and elapsed < 10.0
    report("latency-model oracle", ok,
           f"max rel err pp<=2 {max(small):.1e}; MAPE refined {m_ref:.3g}% vs prev {m_prev:.3g}% "
           f"(strictly larger: {strict_ok}); {elapsed:.2f}s")
    report("latency-model oracle, hop=0.05 variant", c_prev > c_ref and c_ref <= 10.0,
           f"MAPE refined {c_ref:.2f}% vs prev {c_prev:.2f}%")
    assert exact_ok and mape_ok and elapsed < 10.0
    assert c_prev > c_ref
    # with hops=0 both closed forms reduce to (n_mb + pp - 1) * C, so they cannot differ here
    assert strict_ok, f"t_prev MAPE {m_prev}% is not strictly larger than refined MAPE {m_ref}% at hops=0"


def closed_form_checks():
    cluster2 = ClusterSpec(2, 1, 1e6)
    bw2 = BandwidthMatrix(inter=((0, 10.0), (10.0, 0)), intra=(300.0, 300.0))
    c_pp2 = ParallelConfig.make(2, 1, 1, 1, 1)
    c_dp2 = ParallelConfig.make(1, 1, 2, 2, 1)
    m = ModelSpec(n_layers=4, n_hidden=1024, n_heads=16, seq_len=1024, vocab_size=1000)
    big = ModelSpec(n_layers=4, n_hidden=1024, n_heads=16, seq_len=1024, vocab_size=1000, n_params=10**9)
    c221 = ParallelConfig.make(2, 2, 1, 1, 1)
    act = 1 * 1024 * 1024 * (4 / 2) * 2 * 1 / memest.MIB
    p = parse_matrix("10,8\n9,10\n300,300", 2)
    s = list("abcd")
    exact = [
        ("divisors(6)", divisors(6), [1, 2, 3, 6]),
        ("divisors(1)", divisors(1), [1]),
        ("divisors(8)", divisors(8), [1, 2, 4, 8]),
        ("factorizations(1,1)", factorizations(1, 1), [(1, 1, 1)]),
        ("t_bubble pp=1", t_bubble(1, 2.0, 0.5, 9.0), 2.5),
        ("t_bubble pp=2", t_bubble(2, 0.0, 0.0, 1.0), 1.0),
        ("t_straggler pp=1", t_straggler(1, 2.0, 1.0), 0.0),
        ("t_straggler pp=4", t_straggler(4, 1.0, 0.25), 3.75),
        ("t_total pp=2", refined_total(2, 2, 2.0, 0.0, 0.0, 0.0)[2], 6.0),
        ("t_prev pp=2", prev_total(2, 2, 2.0, 0.0, 0.0, 0.0), 6.0),
        ("t_prev pp=1", prev_total(1, 1, 1.5, 0.5, 0.0, 0.25), 2.25),
        ("msg_pp", message_sizes(m, c_pp2).msg_pp, 2_097_152),
        ("msg_dp pp=tp=1", message_sizes(m, c_dp2).msg_dp, m.n_params * 2),
        ("t_pp pp=1", t_pp_comm(initial_mapping(c_dp2, cluster2), bw2, 1e9, c_dp2), 0.0),
        ("t_dp dp=1", t_dp_comm(initial_mapping(c_pp2, cluster2), bw2, 1e9, c_pp2, cluster2), 0.0),
        ("is_runnable 30000", memest.is_runnable(30000, 32768, 0.10), False),
        ("is_runnable 0", memest.is_runnable(0, 32768, 0.10), True),
        ("is_runnable boundary", memest.is_runnable(32768, 32768, 0.0), True),
        ("parse inter", p.inter[0][1:] + p.inter[1][:1], (8.0, 9.0)),
        ("parse intra", p.intra, (300.0, 300.0)),
        ("synth fraction 0", synth_topology(3, 9.0, 1.0, 0.0, 50.0, 0).is_uniform(), True),
        ("synth fraction 1", {v for i, r in enumerate(synth_topology(3, 9.0, 1.0, 1.0, 50.0, 0).inter)
                              for j, v in enumerate(r) if i != j}, {1.0}),
        ("swap", swap(s, 1, 3), list("adcb")),
        ("reverse 1..3", reverse(s, 1, 3), list("adcb")),
        ("reverse 0..3", reverse(s, 0, 3), list("dcba")),
        ("migration", migrate(s, 0, 2), list("bcad")),
        ("simulate pp=2", simulate(SimConfig.uniform(2, 2, 1.0, 1.0)).makespan, 6.0),
        ("simulate pp=1", simulate(SimConfig.uniform(1, 3, 0.5, 1.5, dp_time=0.25)).makespan, 6.25),
    ]
    spot = [
        ("t_bubble pp=3", t_bubble(3, 1.0, 0.0, 0.1), 3.2),
        ("t_total pp=1", refined_total(1, 4, 1.0, 0.1, 0.0, 0.3)[2], 4.7),
        ("t_pp one hop", t_pp_comm(initial_mapping(c_pp2, cluster2), bw2, 1e9, c_pp2), 0.2),
        ("t_dp two nodes", t_dp_comm(initial_mapping(c_dp2, cluster2), bw2, 1e9, c_dp2, cluster2), 0.1),
        ("heuristic weights", memest.heuristic_estimate(big, c221) - act, 4e9 / memest.MIB),
    ]
    return exact, spot


def test_closed_form_unit_suite():
    t0 = time.perf_counter()
    exact, spot = closed_form_checks()
    bad = [name for name, got, want in exact if got != want]
    bad += [name for name, got, want in spot if abs(got - want) > 1e-12]
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 1.0
    report("closed-form unit suite", ok,
           f"{len(exact)} exact + {len(spot)} spot checks, failures {bad or 'none'}; {elapsed:.3f}s")
    assert ok


def test_sa_optimality():
    t0 = time.perf_counter()
    ratios, monotone = [], []
    for i in range(20):
        conf, cluster, bw, profile, model = sa_instance(i)
        res = sa_search(conf, cluster, bw, profile, model, SaParams(iterations=5000, seed=i))
        n_slots = conf.pp * conf.dp

        def objective(perm):
            mp = WorkerMapping.from_slots(perm, conf.pp, conf.tp, conf.dp, cluster.gpus_per_node)
            return t_iteration(conf, mp, bw, profile, model, cluster).t_total

        best, _ = brute_force_slots(objective, n_slots)
        ratios.append(res.latency / best)
        h = res.best_history
        monotone.append(all(b <= a for a, b in zip(h, h[1:])))
    elapsed = time.perf_counter() - t0
    within = sum(r <= 1.02 for r in ratios)
    ok = within >= 19 and all(monotone) and elapsed < 60.0
    report("SA optimality", ok,
           f"{within}/20 within 2% of optimum (worst {max(ratios):.4f}), non-increasing best series "
           f"{sum(monotone)}/20; {elapsed:.1f}s")
    assert ok


def test_six_node_toy():
    t0 = time.perf_counter()
    conf, cluster, bw, profile, model = six_node_instance()
    alphabetical = t_iteration(conf, initial_mapping(conf, cluster), bw, profile, model, cluster).t_total
    res = sa_search(conf, cluster, bw, profile, model, SaParams(iterations=5000))
    dedicated = t_iteration(conf, res.mapping, bw, profile, model, cluster).t_total
    optimum = min(
        t_iteration(conf, WorkerMapping(3, 1, 2, 1, perm), bw, profile, model, cluster).t_total
        for perm in itertools.permutations(range(6))
    )
    elapsed = time.perf_counter() - t0
    gap = abs(alphabetical / dedicated - alphabetical / optimum)
    ok = dedicated < alphabetical and gap <= 1e-9 and elapsed < 5.0
    report("six-node toy", ok,
           f"speedup {alphabetical / dedicated:.6f} vs exhaustive {alphabetical / optimum:.6f} "
           f"(gap {gap:.1e}); {elapsed:.2f}s")
    assert ok


def test_oom_free_recommendations(tmp_path, fixtures_dir, monkeypatch):
    t0 = time.perf_counter()
    for f in fixtures_dir.iterdir():
        (tmp_path / f.name).write_bytes(f.read_bytes())
    monkeypatch.chdir(tmp_path)
    assert cli_main(["train-mem", "--samples", "mem_samples.csv", "--iterations", "5000", "--out", "mem.json"]) == 0
    rc = cli_main(["search", "--model", "model.json", "--cluster", "cluster.json", "--topology", "topology.csv",
                   "--profile", "profile.json", "--memory-model", "mem.json", "--bs-global", "64",
                   "--iterations", "500", "--top-k", "10", "--out", "result.json"])
    doc = json.loads(Path("result.json").read_text())
    model, cluster = toy_model(), toy_cluster()
    confs = [ParallelConfig.from_dict(c["conf"]) for c in doc["top_k"]]
    truth = [memest.synthetic_peak_memory(model, c) for c in confs]
    oom = sum(t > cluster.mem_limit_per_gpu for t in truth)

    samples = memory_training_set()
    under = 0
    for s in samples:
        spec = ModelSpec(n_layers=s.n_layers, n_hidden=s.n_hiddens, n_heads=s.n_heads, seq_len=1024,
                         vocab_size=50257)
        c = ParallelConfig.make(s.pp, s.tp, s.dp, s.bs_global, s.bs_micro)
        under += memest.heuristic_estimate(spec, c) < s.measured_max
    frac = under / len(samples)
    elapsed = time.perf_counter() - t0
    ok = rc == 0 and len(confs) == 10 and oom == 0 and frac >= 0.9 and elapsed < 120.0
    report("OOM-free recommendations", ok,
           f"top-{len(confs)} OOM under ground truth: {oom}; heuristic underestimates {frac:.1%} "
           f"of {len(samples)} points; {elapsed:.1f}s")
    assert ok


def test_1f1b_memory_bound():
    t0 = time.perf_counter()
    rng = random.Random(2024)
    bound_ok = gpipe_ok = 0
    for _ in range(100):
        pp = rng.randint(1, 12)
        n_mb = rng.randint(1, 48)
        f = rng.uniform(0.1, 2.0)
        b = rng.uniform(0.1, 4.0)
        hop = rng.choice([0.0, rng.uniform(0.0, 1.0)])
        one = simulate(SimConfig.uniform(pp, n_mb, f, b, hop=hop, schedule=ONE_F_ONE_B))
        bound_ok += all(peak <= min(pp - s + 1, n_mb) for s, peak in enumerate(one.peak_inflight, start=1))
        gp = simulate(SimConfig.uniform(pp, n_mb, f, b, hop=hop, schedule=GPIPE))
        gpipe_ok += gp.peak_inflight[0] == n_mb
    elapsed = time.perf_counter() - t0
    ok = bound_ok == 100 and gpipe_ok == 100 and elapsed < 10.0
    report("1F1B memory bound", ok,
           f"bound holds {bound_ok}/100, GPipe first stage holds all microbatches {gpipe_ok}/100; {elapsed:.2f}s")
    assert ok


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _payload(path) -> str:
    doc = json.loads(Path(path).read_text())
    doc.pop("manifest", None)
    return json.dumps(doc, sort_keys=True)


def test_determinism(tmp_path, fixtures_dir, monkeypatch):
    t0 = time.perf_counter()
    for f in fixtures_dir.iterdir():
        (tmp_path / f.name).write_bytes(f.read_bytes())
    monkeypatch.chdir(tmp_path)
    search = ["search", "--model", "model.json", "--cluster", "cluster.json", "--topology", "topology.csv",
              "--profile", "profile.json", "--bs-global", "64", "--iterations", "300", "--seed", "7",
              "--out", "s.json", "--csv", "s.csv"]
    train = ["train-mem", "--samples", "mem_samples.csv", "--iterations", "300", "--seed", "3", "--out", "m.json"]
    sim = ["simulate", "--pp", "6", "--n-mb", "24", "--compute", "0.9", "--hop", "0.07", "--dp-time", "0.2",
           "--out", "sim.json", "--trace", "sim.csv"]
    checks = {}
    for name, argv, outs in [
        ("train", train, ["m.json"]),
        ("search", search[:-4] + ["--memory-model", "m.json"] + search[-4:], ["s.json", "s.csv"]),
        ("simulate", sim, ["sim.json", "sim.csv"]),
    ]:
        runs = []
        for _ in range(2):
            assert cli_main(argv) == 0
            runs.append([_digest(o) for o in outs])
        checks[name] = runs[0] == runs[1]
    # candidate-level parallelism: same payload as the sequential run
    seq = _payload("s.json")
    par = [a if a != "s.json" else "p.json" for a in search[:-4]] + ["--memory-model", "m.json",
                                                                     "--out", "p.json", "--workers", "2"]
    assert cli_main(par) == 0
    checks["search workers=2"] = _payload("p.json") == seq
    # replaying the manifest of a run reproduces its bytes
    before = _digest("s.json")
    Path("s.json").rename("s0.json")
    assert cli_main(["replay", "s0.json"]) == 0
    checks["replay"] = _digest("s.json") == before
    conf, cluster, bw, profile, model = sa_instance(3)
    a = sa_search(conf, cluster, bw, profile, model, SaParams(iterations=2000, seed=11))
    b = sa_search(conf, cluster, bw, profile, model, SaParams(iterations=2000, seed=11))
    checks["sa_search"] = (a.mapping, a.best_history, a.history) == (b.mapping, b.best_history, b.history)
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 60.0
    report("determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in checks.items())
           + f"; {elapsed:.1f}s")
    assert ok
