from hetplan.core.enumeration import divisors, factorizations
from hetplan.core.types import Candidate, ClusterSpec, ModelSpec, ParallelConfig, SearchResult

__all__ = [
    "Candidate",
    "ClusterSpec",
    "ModelSpec",
    "ParallelConfig",
    "SearchResult",
    "divisors",
    "factorizations",
    "search",
]


def __getattr__(name):
    # search pulls in mapsearch/latency, which themselves import core.types
    if name == "search":
        from hetplan.core.search import search
        return search
    raise AttributeError(name)
