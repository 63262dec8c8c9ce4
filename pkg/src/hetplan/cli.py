"""Command-line driver.

Exit codes: 0 success, 1 no feasible configuration, 2 input/validation error.
Every JSON artifact carries a ``manifest`` block; CSV artifacts get a
``<file>.manifest.json`` sidecar. ``hetplan replay MANIFEST`` re-runs a command.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

from hetplan import __version__
from hetplan.core.types import ClusterSpec, ModelSpec, ParallelConfig
from hetplan.errors import ConfigurationError, InputError, ModelError
from hetplan.latency import ComputeProfile, prev_total, refined_total, t_prev
from hetplan.topology import BandwidthMatrix, parse_matrix, serialize_matrix, synth_topology

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- io


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror or exc}") from None


def read_json(path: str) -> dict:
    try:
        return json.loads(read_text(path))
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def load_model(path: str) -> ModelSpec:
    d = read_json(path)
    return ModelSpec.from_dict(d.get("model", d))


def load_cluster(path: str) -> ClusterSpec:
    d = read_json(path)
    return ClusterSpec.from_dict(d.get("cluster", d))


def load_topology(path: str, n_nodes: int) -> BandwidthMatrix:
    text = read_text(path)
    if path.endswith(".json"):
        try:
            bw = BandwidthMatrix.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})") from None
    else:
        bw = parse_matrix(text, n_nodes)
    if bw.n_nodes != n_nodes:
        raise CliError(f"{path}: topology has {bw.n_nodes} nodes, cluster has {n_nodes}")
    return bw


def load_profile(path: str) -> ComputeProfile:
    return ComputeProfile.from_dict(read_json(path))


def load_memory_model(path: str):
    from hetplan.memest import MemoryModel

    return MemoryModel.from_dict(read_json(path))


def manifest(args: argparse.Namespace, argv: Sequence[str]) -> dict:
    """Run manifest: everything needed to reproduce the invocation."""
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "verbose")}
    return {"tool": "hetplan", "version": __version__, "command": args.command,
            "argv": list(argv), "args": params}


def write_sidecar(path: str, man: dict) -> None:
    write_atomic(f"{path}.manifest.json", dump_json({"manifest": man}))


def plot_path(args, name: str) -> Optional[Path]:
    if not getattr(args, "plot_dir", None):
        return None
    d = Path(args.plot_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


# ----------------------------------------------------------------- subcommands


def cmd_gen_topology(args, man) -> int:
    bw = synth_topology(args.nodes, args.fast, args.slow, args.slow_fraction, args.intra, args.seed)
    if args.out.endswith(".json"):
        write_atomic(args.out, dump_json({"manifest": man, **bw.to_dict()}))
    else:
        write_atomic(args.out, serialize_matrix(bw))
        write_sidecar(args.out, man)
    if (p := plot_path(args, "topology.png")) is not None:
        from hetplan import plotting

        plotting.bandwidth_heatmap(bw, p)
    print(f"wrote {args.nodes}-node topology to {args.out}")
    return EXIT_OK


def cmd_parse_topology(args, man) -> int:
    bw = parse_matrix(read_text(args.input), args.nodes)
    doc = {"manifest": man, **bw.to_dict()}
    if args.out:
        write_atomic(args.out, dump_json(doc))
    else:
        sys.stdout.write(dump_json(doc))
    return EXIT_OK


def cmd_train_mem(args, man) -> int:
    from hetplan import memest

    samples = memest.read_samples(read_text(args.samples))
    model = memest.train(samples, iterations=args.iterations, seed=args.seed, lr=args.lr,
                         batch_size=args.batch_size)
    fit = memest.evaluate(model, samples)
    doc = {"manifest": man, **model.to_dict()}
    write_atomic(args.out, dump_json(doc))
    if (p := plot_path(args, "mem_loss.png")) is not None and model.metadata["loss_log"]:
        from hetplan import plotting

        plotting.loss_curve(model.metadata["loss_log"], memest.LOG_EVERY, p)
    print(f"trained on {len(samples)} samples, final loss {model.metadata['final_loss']:.3e}, "
          f"training MAPE {fit:.2f}%")
    return EXIT_OK


def _conf_from_args(args) -> ParallelConfig:
    return ParallelConfig.make(args.pp, args.tp, args.dp, args.bs_global, args.bs_micro)


def cmd_estimate_mem(args, man) -> int:
    from hetplan import memest

    model = load_model(args.model)
    conf = _conf_from_args(args)
    out = {"manifest": man, "conf": conf.to_dict(),
           "heuristic": memest.heuristic_estimate(model, conf)}
    if args.memory_model:
        out["predicted"] = memest.predict_config(load_memory_model(args.memory_model), model, conf)
    if args.limit is not None:
        ref = out.get("predicted", out["heuristic"])
        out["limit"] = args.limit
        out["margin"] = args.margin
        out["runnable"] = memest.is_runnable(ref, args.limit, args.margin)
    text = dump_json(out)
    if args.out:
        write_atomic(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def _sa_params(args):
    from hetplan.mapsearch import SaParams

    if args.wall_seconds is not None:
        return SaParams(iterations=None, wall_seconds=args.wall_seconds, alpha=args.alpha, seed=args.seed)
    return SaParams(iterations=args.iterations, alpha=args.alpha, seed=args.seed)


def format_table(result, limit: float) -> str:
    head = f"{'rank':>4} {'pp':>3} {'tp':>3} {'dp':>3} {'mb':>4} {'n_mb':>5} {'latency_s':>11} " \
           f"{'alpha_order_s':>13} {'pred_MiB':>9} {'runnable':>8}"
    lines = [head]
    for i, c in enumerate(result.top_k, start=1):
        lines.append(
            f"{i:>4} {c.conf.pp:>3} {c.conf.tp:>3} {c.conf.dp:>3} {c.conf.bs_micro:>4} {c.conf.n_mb:>5} "
            f"{c.latency:>11.5f} {c.initial_latency:>13.5f} {c.memory:>9.0f} {'yes':>8}"
        )
    lines.append(f"evaluated {result.evaluated} candidates, {result.rejected_oom} rejected as OOM "
                 f"(limit {limit:.0f} MiB)")
    return "\n".join(lines) + "\n"


def topk_csv(result) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "pp", "tp", "dp", "bs_micro", "n_mb", "latency", "initial_latency", "memory", "runnable",
                "assignment"])
    for i, c in enumerate(result.top_k, start=1):
        w.writerow([i, c.conf.pp, c.conf.tp, c.conf.dp, c.conf.bs_micro, c.conf.n_mb, repr(c.latency),
                    repr(c.initial_latency), repr(c.memory), "yes", " ".join(map(str, c.mapping.assignment))])
    return buf.getvalue()


def cmd_search(args, man) -> int:
    from hetplan import memest
    from hetplan.core.search import search

    model = load_model(args.model)
    cluster = load_cluster(args.cluster)
    bw = load_topology(args.topology, cluster.n_nodes)
    profile = load_profile(args.profile)
    if args.memory_model:
        memory = load_memory_model(args.memory_model)
    elif args.heuristic_memory:
        memory = memest.heuristic_estimate
    else:
        raise CliError("search needs --memory-model or --heuristic-memory")
    result = search(model, cluster, bw, profile, memory, args.bs_global, _sa_params(args),
                    seed=args.seed, margin=args.margin, top_k=args.top_k, workers=args.workers)
    doc = {"manifest": man, **result.to_dict()}
    if result.best is not None:
        doc["prior_model_latency_of_best"] = t_prev(result.best.conf, bw, profile, model, cluster)
    if args.out:
        write_atomic(args.out, dump_json(doc))
    if args.csv:
        write_atomic(args.csv, topk_csv(result))
        write_sidecar(args.csv, man)
    if result.all_oom:
        print(f"all {result.evaluated} candidates exceed the memory limit "
              f"({cluster.mem_limit_per_gpu:.0f} MiB, margin {args.margin:.0%})", file=sys.stderr)
        return EXIT_INFEASIBLE
    sys.stdout.write(format_table(result, cluster.mem_limit_per_gpu))
    if (p := plot_path(args, "topk.png")) is not None:
        from hetplan import plotting

        plotting.top_k(result.top_k, p, limit=cluster.mem_limit_per_gpu)
        plotting.annealing_curve(result.best.best_history, plot_path(args, "annealing.png"),
                                 initial=result.best.initial_latency)
    return EXIT_OK


def _sim_from_args(args):
    from hetplan import schedsim
    from hetplan.mapsearch import WorkerMapping, initial_mapping

    if args.model:
        if not (args.cluster and args.topology and args.profile):
            raise CliError("placed simulation needs --model, --cluster, --topology and --profile")
        model = load_model(args.model)
        cluster = load_cluster(args.cluster)
        bw = load_topology(args.topology, cluster.n_nodes)
        profile = load_profile(args.profile)
        conf = _conf_from_args(args)
        conf.check_cluster(cluster)
        if args.mapping:
            d = read_json(args.mapping)
            mapping = WorkerMapping.from_dict(d["best"]["mapping"] if "best" in d else d)
        else:
            mapping = initial_mapping(conf, cluster)
        return schedsim.sim_config_for(conf, mapping, bw, profile, model, cluster,
                                       schedule=args.schedule, fwd_fraction=args.fwd_fraction)
    if args.n_mb is None or args.compute is None:
        raise CliError("abstract simulation needs --n-mb and --compute")
    stage = args.compute
    return schedsim.SimConfig.uniform(args.pp, args.n_mb, stage * args.fwd_fraction,
                                      stage * (1 - args.fwd_fraction), hop=args.hop,
                                      dp_time=args.dp_time, schedule=args.schedule)


def cmd_simulate(args, man) -> int:
    from hetplan import schedsim

    sim = _sim_from_args(args)
    res = schedsim.simulate(sim)
    doc = {"manifest": man, "schedule": sim.schedule, "pp": sim.pp, "n_mb": sim.n_mb,
           "fwd_time": sim.fwd_time, "bwd_time": sim.bwd_time, "dp_time": sim.dp_time, **res.to_dict()}
    if args.out:
        write_atomic(args.out, dump_json(doc))
    if args.trace:
        write_atomic(args.trace, schedsim.trace_export(res))
        write_sidecar(args.trace, man)
    if (p := plot_path(args, f"gantt_{sim.schedule}.png")) is not None:
        from hetplan import plotting

        plotting.gantt(res, p, title=f"{sim.schedule}: pp={sim.pp}, n_mb={sim.n_mb}, "
                                     f"makespan {res.makespan:.4g} s")
    print(f"{sim.schedule}: makespan {res.makespan!r} s, peak in-flight per stage {res.peak_inflight}")
    return EXIT_OK


SWEEP_COLUMNS = ("pp", "n_mb", "compute", "tp_comm", "hop", "dp_time")
COMPARE_HEADER = ("config", "pp", "n_mb", "t_prev", "t_refined", "sim_makespan", "err_prev_pct", "err_refined_pct")


def read_sweep(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise CliError("sweep is empty")
    missing = [c for c in SWEEP_COLUMNS if c not in rows[0]]
    if missing:
        raise CliError(f"sweep is missing columns {missing}")
    out = []
    for i, r in enumerate(rows, start=2):
        try:
            row = {"pp": int(r["pp"]), "n_mb": int(r["n_mb"]), "compute": float(r["compute"]),
                   "tp_comm": float(r["tp_comm"]), "hop": float(r["hop"]), "dp_time": float(r["dp_time"])}
        except (TypeError, ValueError) as exc:
            raise CliError(f"sweep row {i}: {exc}") from None
        if row["pp"] < 1 or row["n_mb"] < 1 or row["compute"] <= 0 or min(row["tp_comm"], row["hop"],
                                                                             row["dp_time"]) < 0:
            raise CliError(f"sweep row {i}: values out of range")
        out.append(row)
    return out


def compare_rows(sweep: Sequence[dict], fwd_fraction: float) -> list[dict]:
    """Both closed forms and the 1F1B simulator on homogeneous sweep points."""
    from hetplan import schedsim

    rows = []
    for r in sweep:
        pp, n_mb, C, T = r["pp"], r["n_mb"], r["compute"], r["tp_comm"]
        path = 2.0 * r["hop"] * (pp - 1)
        refined = refined_total(pp, n_mb, C, T, path, r["dp_time"])[2]
        prev = prev_total(pp, n_mb, C, T, path, r["dp_time"])
        stage = C + T
        sim = schedsim.simulate(schedsim.SimConfig.uniform(
            pp, n_mb, stage * fwd_fraction, stage * (1 - fwd_fraction), hop=r["hop"], dp_time=r["dp_time"]))
        ms = sim.makespan
        rows.append({
            "config": f"pp{pp}_mb{n_mb}", "pp": pp, "n_mb": n_mb,
            "t_prev": prev, "t_refined": refined, "sim_makespan": ms,
            "err_prev_pct": abs(prev - ms) / ms * 100.0,
            "err_refined_pct": abs(refined - ms) / ms * 100.0,
        })
    return rows


def cmd_compare_models(args, man) -> int:
    sweep = read_sweep(read_text(args.sweep))
    rows = compare_rows(sweep, args.fwd_fraction)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_HEADER)
    for r in rows:
        w.writerow([r["config"], r["pp"], r["n_mb"]] + [repr(r[k]) for k in COMPARE_HEADER[3:]])
    mape_prev = sum(r["err_prev_pct"] for r in rows) / len(rows)
    mape_refined = sum(r["err_refined_pct"] for r in rows) / len(rows)
    summary = {"manifest": man, "n": len(rows), "mape_prev_pct": mape_prev, "mape_refined_pct": mape_refined}
    if args.out:
        write_atomic(args.out, buf.getvalue())
        write_atomic(f"{args.out}.manifest.json", dump_json(summary))
    else:
        sys.stdout.write(buf.getvalue())
    if (p := plot_path(args, "model_comparison.png")) is not None:
        from hetplan import plotting

        plotting.model_comparison(rows, p)
    print(f"MAPE vs simulator: prior model {mape_prev:.2f}%, refined model {mape_refined:.2f}%",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_replay(args, man) -> int:
    doc = read_json(args.manifest)
    m = doc.get("manifest", doc)
    if m.get("tool") != "hetplan" or "argv" not in m:
        raise CliError(f"{args.manifest}: not a hetplan manifest")
    if m["argv"] and m["argv"][0] == "replay":
        raise CliError("refusing to replay a replay")
    return main(m["argv"])


# ---------------------------------------------------------------------- parser


def _add_conf_args(p, required: bool = True) -> None:
    p.add_argument("--pp", type=int, required=required, default=1)
    p.add_argument("--tp", type=int, default=1)
    p.add_argument("--dp", type=int, default=1)
    p.add_argument("--bs-global", type=int, default=None)
    p.add_argument("--bs-micro", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hetplan {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-topology", help="write a seeded synthetic bandwidth matrix")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--fast", type=float, default=12.5, help="fast inter-node GB/s (default 12.5)")
    p.add_argument("--slow", type=float, default=6.25, help="slow inter-node GB/s (default 6.25)")
    p.add_argument("--slow-fraction", type=float, default=0.25)
    p.add_argument("--intra", type=float, default=300.0, help="intra-node GB/s (default 300)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help=".csv or .json")
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_gen_topology)

    p = sub.add_parser("parse-topology", help="validate a measured CSV matrix and emit JSON")
    p.add_argument("input")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_parse_topology)

    p = sub.add_parser("train-mem", help="fit the MLP memory estimator")
    p.add_argument("--samples", required=True, help="11-column memory sample CSV")
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_train_mem)

    p = sub.add_parser("estimate-mem", help="estimate peak memory of one configuration")
    p.add_argument("--model", required=True)
    p.add_argument("--memory-model")
    _add_conf_args(p)
    p.add_argument("--limit", type=float, help="MiB; reports runnability when given")
    p.add_argument("--margin", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate_mem)

    p = sub.add_parser("search", help="rank configurations and placements")
    p.add_argument("--model", required=True)
    p.add_argument("--cluster", required=True)
    p.add_argument("--topology", required=True, help="CSV matrix or JSON")
    p.add_argument("--profile", required=True)
    p.add_argument("--memory-model")
    p.add_argument("--heuristic-memory", action="store_true", help="use the heuristic estimator instead")
    p.add_argument("--bs-global", type=int, required=True)
    p.add_argument("--iterations", type=int, default=2000, help="SA iterations per candidate (default 2000)")
    p.add_argument("--wall-seconds", type=float, help="SA wall-clock budget per candidate (not reproducible)")
    p.add_argument("--alpha", type=float, default=0.999)
    p.add_argument("--margin", type=float, default=0.10)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="SearchResult JSON")
    p.add_argument("--csv", help="top-k CSV")
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("simulate", help="simulate one pipeline iteration")
    p.add_argument("--schedule", choices=("1f1b", "gpipe"), default="1f1b")
    _add_conf_args(p, required=False)
    p.add_argument("--n-mb", type=int, help="abstract mode: microbatches")
    p.add_argument("--compute", type=float, help="abstract mode: C + T_TP per stage and microbatch (s)")
    p.add_argument("--hop", type=float, default=0.0, help="abstract mode: one-way hop time (s)")
    p.add_argument("--dp-time", type=float, default=0.0, help="abstract mode: DP all-reduce time (s)")
    p.add_argument("--fwd-fraction", type=float, default=1 / 3, help="forward share of the stage time")
    p.add_argument("--model")
    p.add_argument("--cluster")
    p.add_argument("--topology")
    p.add_argument("--profile")
    p.add_argument("--mapping", help="mapping JSON or search result JSON (uses best)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--trace")
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare-models", help="prior vs refined closed form against the simulator")
    p.add_argument("--sweep", required=True, help="CSV with columns " + ",".join(SWEEP_COLUMNS))
    p.add_argument("--fwd-fraction", type=float, default=1 / 3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_compare_models)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "bs_global", None) is None and args.command in ("estimate-mem",):
        args.bs_global = args.dp * args.bs_micro
    if args.command == "simulate" and args.model and args.bs_global is None:
        parser.error("placed simulation needs --bs-global")
    try:
        return args.func(args, manifest(args, argv))
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (InputError, ConfigurationError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
