"""Domain types shared by every module of the planner."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

from hetplan.errors import InputError


def _require_positive_int(name: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise InputError(f"{name} must be a positive integer, got {value!r}")
    return value


@dataclass(frozen=True)
class ModelSpec:
    """Transformer shape.

    ``n_params`` defaults to ``12 * n_layers * n_hidden**2 + vocab_size * n_hidden``;
    pass it explicitly to override the approximation.
    """

    n_layers: int
    n_hidden: int
    n_heads: int
    seq_len: int
    vocab_size: int
    bytes_per_element: int = 2
    n_params: Optional[int] = None

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_hidden", "n_heads", "seq_len", "vocab_size", "bytes_per_element"):
            _require_positive_int(name, getattr(self, name))
        if self.n_hidden % self.n_heads:
            raise InputError(f"n_hidden={self.n_hidden} is not divisible by n_heads={self.n_heads}")
        if self.n_params is None:
            derived = 12 * self.n_layers * self.n_hidden ** 2 + self.vocab_size * self.n_hidden
            object.__setattr__(self, "n_params", derived)
        else:
            _require_positive_int("n_params", self.n_params)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_hidden": self.n_hidden,
            "n_heads": self.n_heads,
            "seq_len": self.seq_len,
            "vocab_size": self.vocab_size,
            "bytes_per_element": self.bytes_per_element,
            "n_params": self.n_params,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(
                n_layers=d["n_layers"],
                n_hidden=d["n_hidden"],
                n_heads=d["n_heads"],
                seq_len=d["seq_len"],
                vocab_size=d["vocab_size"],
                bytes_per_element=d.get("bytes_per_element", 2),
                n_params=d.get("n_params"),
            )
        except KeyError as exc:
            raise InputError(f"model document is missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class ClusterSpec:
    n_nodes: int
    gpus_per_node: int
    mem_limit_per_gpu: float  # MiB
    topology_id: str = ""

    def __post_init__(self) -> None:
        _require_positive_int("n_nodes", self.n_nodes)
        _require_positive_int("gpus_per_node", self.gpus_per_node)
        if not self.mem_limit_per_gpu > 0:
            raise InputError(f"mem_limit_per_gpu must be > 0, got {self.mem_limit_per_gpu!r}")

    @property
    def n_gpus(self) -> int:
        return self.n_nodes * self.gpus_per_node

    def node_of(self, gpu: int) -> int:
        return gpu // self.gpus_per_node

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "gpus_per_node": self.gpus_per_node,
            "mem_limit_per_gpu": self.mem_limit_per_gpu,
            "topology_id": self.topology_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSpec":
        try:
            return cls(
                n_nodes=d["n_nodes"],
                gpus_per_node=d["gpus_per_node"],
                mem_limit_per_gpu=d["mem_limit_per_gpu"],
                topology_id=d.get("topology_id", ""),
            )
        except KeyError as exc:
            raise InputError(f"cluster document is missing field {exc.args[0]!r}") from None


@dataclass(frozen=True, order=True)
class ParallelConfig:
    """One candidate of the configuration space.

    Construct through :meth:`make` to derive ``bs_mini`` and ``n_mb`` and have the
    batch relations checked.
    """

    pp: int
    tp: int
    dp: int
    bs_global: int
    bs_mini: int
    bs_micro: int
    n_mb: int

    def __post_init__(self) -> None:
        for name in ("pp", "tp", "dp", "bs_global", "bs_mini", "bs_micro", "n_mb"):
            _require_positive_int(name, getattr(self, name))
        if self.bs_mini * self.dp != self.bs_global:
            raise InputError(f"bs_mini={self.bs_mini} != bs_global/dp ({self.bs_global}/{self.dp})")
        if self.bs_micro * self.n_mb != self.bs_mini:
            raise InputError(f"bs_micro={self.bs_micro} does not split bs_mini={self.bs_mini} into n_mb={self.n_mb}")

    @classmethod
    def make(cls, pp: int, tp: int, dp: int, bs_global: int, bs_micro: int) -> "ParallelConfig":
        if dp < 1 or bs_global % dp:
            raise InputError(f"dp={dp} does not divide bs_global={bs_global}")
        bs_mini = bs_global // dp
        if bs_micro < 1 or bs_mini % bs_micro:
            raise InputError(f"bs_micro={bs_micro} does not divide bs_mini={bs_mini}")
        return cls(pp, tp, dp, bs_global, bs_mini, bs_micro, bs_mini // bs_micro)

    @property
    def n_gpus(self) -> int:
        return self.pp * self.tp * self.dp

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.pp, self.tp, self.dp, self.bs_micro)

    def check_cluster(self, cluster: ClusterSpec) -> None:
        if self.n_gpus != cluster.n_gpus:
            raise InputError(f"pp*tp*dp={self.n_gpus} != cluster GPU count {cluster.n_gpus}")
        if cluster.gpus_per_node % self.tp:
            raise InputError(f"tp={self.tp} does not divide gpus_per_node={cluster.gpus_per_node}")

    def to_dict(self) -> dict:
        return {
            "pp": self.pp,
            "tp": self.tp,
            "dp": self.dp,
            "bs_global": self.bs_global,
            "bs_mini": self.bs_mini,
            "bs_micro": self.bs_micro,
            "n_mb": self.n_mb,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParallelConfig":
        return cls.make(d["pp"], d["tp"], d["dp"], d["bs_global"], d["bs_micro"])


@dataclass(frozen=True)
class Candidate:
    """A ranked entry of a search: configuration, placement, modeled latency, memory."""

    conf: ParallelConfig
    mapping: Any  # hetplan.mapsearch.WorkerMapping
    latency: float
    memory: float  # MiB, predicted
    initial_latency: Optional[float] = None  # alphabetical placement
    best_history: tuple[float, ...] = field(default=(), repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "conf": self.conf.to_dict(),
            "mapping": self.mapping.to_dict(),
            "latency": self.latency,
            "memory": self.memory,
            "initial_latency": self.initial_latency,
        }


@dataclass
class SearchResult:
    best: Optional[Candidate]
    top_k: list[Candidate] = field(default_factory=list)
    rejected_oom: int = 0
    evaluated: int = 0

    @property
    def all_oom(self) -> bool:
        return not self.top_k

    def to_dict(self) -> dict:
        return {
            "best": self.best.to_dict() if self.best is not None else None,
            "top_k": [c.to_dict() for c in self.top_k],
            "rejected_oom": self.rejected_oom,
            "evaluated": self.evaluated,
        }
