"""Enumeration of the (pp, tp, dp) and microbatch search space."""
from __future__ import annotations

from hetplan.errors import InputError


def divisors(n: int) -> list[int]:
    """All positive divisors of ``n`` in ascending order."""
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise InputError(f"divisors() needs a positive integer, got {n!r}")
    small, large = [], []
    d = 1
    while d * d <= n:
        if n % d == 0:
            small.append(d)
            if d * d != n:
                large.append(n // d)
        d += 1
    return small + large[::-1]


def factorizations(n_gpus: int, gpus_per_node: int) -> list[tuple[int, int, int]]:
    """Ordered triples (pp, tp, dp) with pp*tp*dp == n_gpus and tp | gpus_per_node.

    Sorted lexicographically. Keeping tp inside a node is what makes the
    tensor-parallel all-reduce an intra-node cost.
    """
    if isinstance(n_gpus, bool) or not isinstance(n_gpus, int) or n_gpus < 1:
        raise InputError(f"GPU count must be a positive integer, got {n_gpus!r}")
    if isinstance(gpus_per_node, bool) or not isinstance(gpus_per_node, int) or gpus_per_node < 1:
        raise InputError(f"gpus_per_node must be a positive integer, got {gpus_per_node!r}")
    if n_gpus % gpus_per_node:
        raise InputError(f"gpus_per_node={gpus_per_node} does not divide G={n_gpus}")
    out = []
    for pp in divisors(n_gpus):
        rest = n_gpus // pp
        for tp in divisors(rest):
            if gpus_per_node % tp == 0:
                out.append((pp, tp, rest // tp))
    return out
