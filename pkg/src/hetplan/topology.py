"""Node-level bandwidth matrices: CSV/JSON ingestion and synthetic generation.

CSV layout (row-major, ``,`` separated, no header)::

    inter[0][0],inter[0][1],...,inter[0][n-1]
    ...
    inter[n-1][0],...,inter[n-1][n-1]
    intra[0],...,intra[n-1]

All values are attained bandwidths in GB/s. Diagonal ``inter`` entries are
ignored on read and replaced by the node's intra bandwidth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from hetplan.errors import InputError, ParseError

GB = 1e9


@dataclass(frozen=True)
class BandwidthMatrix:
    inter: tuple[tuple[float, ...], ...]
    intra: tuple[float, ...]

    def __post_init__(self) -> None:
        n = len(self.intra)
        if n < 1:
            raise InputError("bandwidth matrix needs at least one node")
        if len(self.inter) != n or any(len(row) != n for row in self.inter):
            raise InputError(f"inter matrix must be {n}x{n}")
        for i, row in enumerate(self.inter):
            for j, v in enumerate(row):
                if i != j and not (math.isfinite(v) and v > 0):
                    raise InputError(f"inter[{i}][{j}]={v!r} must be finite and positive")
        for i, v in enumerate(self.intra):
            if not (math.isfinite(v) and v > 0):
                raise InputError(f"intra[{i}]={v!r} must be finite and positive")
        fixed = tuple(
            tuple(float(self.intra[i]) if i == j else float(v) for j, v in enumerate(row))
            for i, row in enumerate(self.inter)
        )
        object.__setattr__(self, "inter", fixed)
        object.__setattr__(self, "intra", tuple(float(v) for v in self.intra))

    @property
    def n_nodes(self) -> int:
        return len(self.intra)

    def node_bw(self, a: int, b: int) -> float:
        """GB/s from node ``a`` to node ``b`` (intra bandwidth when a == b)."""
        return self.inter[a][b]

    def gpu_bw(self, g1: int, g2: int, gpus_per_node: int) -> float:
        """GB/s between two GPUs under node-major numbering."""
        a, b = g1 // gpus_per_node, g2 // gpus_per_node
        if a == b:
            return self.intra[a]
        return self.inter[a][b]

    def nominal(self) -> "BandwidthMatrix":
        """Uniform matrix at the best measured value of each link class."""
        n = self.n_nodes
        intra = max(self.intra)
        off = [v for i, row in enumerate(self.inter) for j, v in enumerate(row) if i != j]
        inter = max(off) if off else intra
        return BandwidthMatrix(
            inter=tuple(tuple(intra if i == j else inter for j in range(n)) for i in range(n)),
            intra=(intra,) * n,
        )

    def is_uniform(self) -> bool:
        off = {v for i, row in enumerate(self.inter) for j, v in enumerate(row) if i != j}
        return len(off) <= 1 and len(set(self.intra)) == 1

    def to_dict(self) -> dict:
        return {"n_nodes": self.n_nodes, "inter": [list(r) for r in self.inter], "intra": list(self.intra)}

    @classmethod
    def from_dict(cls, d: dict) -> "BandwidthMatrix":
        try:
            m = cls(inter=tuple(tuple(r) for r in d["inter"]), intra=tuple(d["intra"]))
        except KeyError as exc:
            raise InputError(f"topology document is missing field {exc.args[0]!r}") from None
        if "n_nodes" in d and d["n_nodes"] != m.n_nodes:
            raise InputError(f"n_nodes={d['n_nodes']} disagrees with matrix size {m.n_nodes}")
        return m


def _parse_value(tok: str, row: int, col: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"row {row}, column {col}: {tok.strip()!r} is not a number") from None
    if not math.isfinite(v) or v <= 0:
        raise ParseError(f"row {row}, column {col}: bandwidth must be finite and positive, got {tok.strip()!r}")
    return v


def parse_matrix(text: str, n_nodes: int) -> BandwidthMatrix:
    """Parse the CSV layout described in the module docstring. Rows and columns are 1-based in errors."""
    if n_nodes < 1:
        raise InputError(f"n_nodes must be >= 1, got {n_nodes}")
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != n_nodes + 1:
        raise ParseError(f"expected {n_nodes + 1} rows ({n_nodes} inter + 1 intra), got {len(lines)}")
    rows = []
    for r, line in enumerate(lines, start=1):
        toks = line.split(",")
        if len(toks) != n_nodes:
            raise ParseError(f"row {r}: expected {n_nodes} columns, got {len(toks)}")
        rows.append([_parse_value(t, r, c) for c, t in enumerate(toks, start=1)])
    return BandwidthMatrix(inter=tuple(tuple(r) for r in rows[:-1]), intra=tuple(rows[-1]))


def serialize_matrix(m: BandwidthMatrix) -> str:
    lines = [",".join(repr(v) for v in row) for row in m.inter]
    lines.append(",".join(repr(v) for v in m.intra))
    return "\n".join(lines) + "\n"


def uniform_topology(n_nodes: int, inter_bw: float, intra_bw: float) -> BandwidthMatrix:
    return BandwidthMatrix(
        inter=tuple(tuple(inter_bw for _ in range(n_nodes)) for _ in range(n_nodes)),
        intra=(intra_bw,) * n_nodes,
    )


def synth_topology(
    n_nodes: int,
    fast_bw: float,
    slow_bw: float,
    slow_fraction: float,
    intra_bw: float,
    seed: int,
) -> BandwidthMatrix:
    """Uniform fast links with ceil(slow_fraction * n(n-1)) directed pairs degraded to ``slow_bw``."""
    if n_nodes < 1:
        raise InputError(f"n_nodes must be >= 1, got {n_nodes}")
    if not (0 < slow_bw <= fast_bw) or not math.isfinite(fast_bw):
        raise InputError(f"need fast_bw >= slow_bw > 0, got fast={fast_bw}, slow={slow_bw}")
    if not 0.0 <= slow_fraction <= 1.0:
        raise InputError(f"slow_fraction must lie in [0, 1], got {slow_fraction}")
    if not (math.isfinite(intra_bw) and intra_bw > 0):
        raise InputError(f"intra_bw must be positive, got {intra_bw}")
    pairs = [(i, j) for i in range(n_nodes) for j in range(n_nodes) if i != j]
    n_slow = math.ceil(slow_fraction * len(pairs))
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(len(pairs))[:n_slow]
    inter = [[fast_bw] * n_nodes for _ in range(n_nodes)]
    for k in chosen:
        i, j = pairs[int(k)]
        inter[i][j] = slow_bw
    return BandwidthMatrix(inter=tuple(tuple(r) for r in inter), intra=(intra_bw,) * n_nodes)
