"""Report figures. Every function writes one file and closes its figure."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FWD_COLOR = "#4C72B0"
BWD_COLOR = "#DD8452"
AR_COLOR = "#55A868"


def _save(fig, path, width=6.4, height=None):
    height = height or width / 1.618
    fig.set_size_inches(width, height)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def gantt(result, path, title: str = ""):
    """Per-stage timeline of a simulated iteration."""
    fig, ax = plt.subplots()
    colors = {"F": FWD_COLOR, "B": BWD_COLOR, "AR": AR_COLOR}
    for e in result.trace:
        ax.broken_barh([(e.time, e.end - e.time)], (e.stage - 0.4, 0.8),
                       facecolors=colors[e.kind], edgecolors="white", linewidth=0.5)
        if e.microbatch >= 0 and e.end - e.time > 0:
            ax.text(e.time + (e.end - e.time) / 2, e.stage, str(e.microbatch + 1),
                    ha="center", va="center", fontsize=6, color="white")
    n_stages = len(result.busy)
    ax.set_yticks(range(n_stages))
    ax.set_yticklabels([f"stage {s}" for s in range(n_stages)])
    ax.invert_yaxis()
    ax.set_xlabel("time (s)")
    ax.set_title(title or f"makespan {result.makespan:.4g} s")
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in (FWD_COLOR, BWD_COLOR, AR_COLOR)]
    ax.legend(handles, ["forward", "backward", "DP all-reduce"], loc="lower right", fontsize=7)
    return _save(fig, path, width=7.5, height=0.5 * n_stages + 1.8)


def model_comparison(rows: Sequence[dict], path):
    """Closed-form estimates against simulated makespan; the diagonal is a perfect estimate."""
    fig, ax = plt.subplots()
    sim = [r["sim_makespan"] for r in rows]
    ax.scatter(sim, [r["t_prev"] for r in rows], marker="x", label="prior model")
    ax.scatter(sim, [r["t_refined"] for r in rows], marker="o", facecolors="none",
               edgecolors="C1", label="refined model")
    lo, hi = min(sim), max(sim)
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("simulated iteration time (s)")
    ax.set_ylabel("estimated iteration time (s)")
    ax.legend()
    return _save(fig, path)


def annealing_curve(best_history: Sequence[float], path, initial: float | None = None):
    fig, ax = plt.subplots()
    ax.plot(range(1, len(best_history) + 1), best_history, lw=1.2)
    if initial is not None:
        ax.axhline(initial, color="grey", ls=":", lw=0.8, label="alphabetical placement")
        ax.legend()
    ax.set_xlabel("iteration")
    ax.set_ylabel("best modeled latency (s)")
    return _save(fig, path)


def top_k(candidates, path, limit: float | None = None):
    """Modeled latency and predicted memory of the ranked configurations."""
    labels = [f"{c.conf.pp}/{c.conf.tp}/{c.conf.dp}\nmb{c.conf.bs_micro}" for c in candidates]
    x = range(len(candidates))
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True)
    ax1.bar(x, [c.latency for c in candidates], color=FWD_COLOR, label="dedicated")
    initial = [c.initial_latency for c in candidates]
    if all(v is not None for v in initial):
        ax1.scatter(x, initial, color="k", marker="_", s=200, label="alphabetical")
    ax1.set_ylabel("latency (s)")
    ax1.legend(fontsize=7)
    ax2.bar(x, [c.memory for c in candidates], color=BWD_COLOR)
    if limit is not None:
        ax2.axhline(limit, color="r", ls="--", lw=0.8)
    ax2.set_ylabel("pred. memory (MiB)")
    ax2.set_xticks(list(x))
    ax2.set_xticklabels(labels, fontsize=6)
    return _save(fig, path, width=7.0, height=5.0)


def loss_curve(loss_log: Sequence[float], every: int, path):
    fig, ax = plt.subplots()
    ax.semilogy([every * (i + 1) for i in range(len(loss_log))], loss_log, marker=".")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training MSE (normalized)")
    return _save(fig, path)


def bandwidth_heatmap(bw, path):
    fig, ax = plt.subplots()
    n = bw.n_nodes
    grid = [[float("nan") if i == j else bw.inter[i][j] for j in range(n)] for i in range(n)]
    im = ax.imshow(grid, cmap="viridis")
    ax.set_xlabel("to node")
    ax.set_ylabel("from node")
    fig.colorbar(im, ax=ax, label="GB/s")
    return _save(fig, path, width=5.0, height=4.2)
