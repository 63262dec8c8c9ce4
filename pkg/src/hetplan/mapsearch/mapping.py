"""Logical-worker to GPU placements and the string moves used to perturb them.

Worker ``(x, y, z)`` (stage, tensor rank, replica; all 0-based) has flat index
``(z * pp + x) * tp + y``, so each pipeline replica is one contiguous run and
each tensor-parallel group ``(x, z)`` is a block of ``tp`` consecutive workers.

Search operates on *slots*: aligned blocks of ``tp`` GPUs inside a node. A slot
permutation ``perm`` places TP group ``k = z * pp + x`` on GPUs
``perm[k] * tp .. perm[k] * tp + tp - 1``; this keeps every TP group on one node.
With ``tp == gpus_per_node`` slots are whole nodes.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

from hetplan.core.types import ClusterSpec, ParallelConfig
from hetplan.errors import InfeasibleError, InputError

MOVES = ("migration", "swap", "reverse")


@dataclass(frozen=True)
class WorkerMapping:
    pp: int
    tp: int
    dp: int
    gpus_per_node: int
    assignment: tuple[int, ...]

    @property
    def n_workers(self) -> int:
        return self.pp * self.tp * self.dp

    def worker_index(self, x: int, y: int, z: int) -> int:
        return (z * self.pp + x) * self.tp + y

    def gpu(self, x: int, y: int, z: int) -> int:
        return self.assignment[(z * self.pp + x) * self.tp + y]

    def node(self, x: int, y: int, z: int) -> int:
        return self.gpu(x, y, z) // self.gpus_per_node

    def node_of_worker(self) -> tuple[int, ...]:
        return tuple(g // self.gpus_per_node for g in self.assignment)

    @classmethod
    def from_slots(cls, perm: Sequence[int], pp: int, tp: int, dp: int, gpus_per_node: int) -> "WorkerMapping":
        assignment = tuple(s * tp + y for s in perm for y in range(tp))
        return cls(pp, tp, dp, gpus_per_node, assignment)

    def slots(self) -> tuple[int, ...]:
        """Slot permutation of this mapping; raises if it is not slot-aligned."""
        out = []
        for k in range(self.pp * self.dp):
            block = self.assignment[k * self.tp:(k + 1) * self.tp]
            base = block[0]
            if base % self.tp or any(g != base + y for y, g in enumerate(block)):
                raise InputError(f"TP group {k} is not an aligned GPU block: {block}")
            out.append(base // self.tp)
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "pp": self.pp,
            "tp": self.tp,
            "dp": self.dp,
            "gpus_per_node": self.gpus_per_node,
            "assignment": list(self.assignment),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkerMapping":
        return cls(d["pp"], d["tp"], d["dp"], d["gpus_per_node"], tuple(d["assignment"]))


def initial_mapping(conf: ParallelConfig, cluster: ClusterSpec) -> WorkerMapping:
    """Alphabetical placement: replica 0's stages on the first GPUs, then replica 1, ..."""
    if conf.tp > cluster.gpus_per_node or cluster.gpus_per_node % conf.tp:
        raise InfeasibleError(f"tp={conf.tp} cannot be placed inside nodes of {cluster.gpus_per_node} GPUs")
    if conf.n_gpus != cluster.n_gpus:
        raise InfeasibleError(f"pp*tp*dp={conf.n_gpus} != cluster GPU count {cluster.n_gpus}")
    return WorkerMapping(conf.pp, conf.tp, conf.dp, cluster.gpus_per_node, tuple(range(conf.n_gpus)))


def validate_mapping(mapping: WorkerMapping, conf: ParallelConfig, cluster: ClusterSpec) -> bool:
    """Bijection onto the cluster's GPUs, shape match, and every TP group on one node."""
    if (mapping.pp, mapping.tp, mapping.dp) != (conf.pp, conf.tp, conf.dp):
        return False
    if mapping.gpus_per_node != cluster.gpus_per_node:
        return False
    g = cluster.n_gpus
    a = mapping.assignment
    if len(a) != conf.n_gpus or len(a) != g:
        return False
    if any(not isinstance(v, int) or v < 0 or v >= g for v in a):
        return False
    if len(set(a)) != len(a):
        return False
    for k in range(conf.pp * conf.dp):
        nodes = {v // cluster.gpus_per_node for v in a[k * conf.tp:(k + 1) * conf.tp]}
        if len(nodes) != 1:
            return False
    return True


def swap(seq: Sequence, i: int, j: int) -> list:
    out = list(seq)
    out[i], out[j] = out[j], out[i]
    return out


def reverse(seq: Sequence, i: int, j: int) -> list:
    """Reverse the inclusive substring ``seq[i..j]``."""
    if i > j:
        i, j = j, i
    out = list(seq)
    out[i:j + 1] = out[i:j + 1][::-1]
    return out


def migrate(seq: Sequence, src: int, dst: int) -> list:
    """Remove the element at ``src`` and reinsert it so it ends up at index ``dst``."""
    out = list(seq)
    item = out.pop(src)
    out.insert(dst, item)
    return out


def random_move(perm: Sequence[int], kind: str, rng: random.Random) -> list[int]:
    n = len(perm)
    if n < 2:
        return list(perm)
    i = rng.randrange(n)
    j = rng.randrange(n - 1)
    if j >= i:
        j += 1
    if kind == "swap":
        return swap(perm, i, j)
    if kind == "reverse":
        return reverse(perm, i, j)
    if kind == "migration":
        return migrate(perm, i, j)
    raise InputError(f"unknown move {kind!r}; expected one of {MOVES}")


def propose_move(mapping: WorkerMapping, kind: str, rng: random.Random) -> WorkerMapping:
    """Apply one slot-level move; bijection and TP locality are preserved by construction."""
    perm = random_move(mapping.slots(), kind, rng)
    return WorkerMapping.from_slots(perm, mapping.pp, mapping.tp, mapping.dp, mapping.gpus_per_node)
