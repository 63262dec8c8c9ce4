from hetplan.mapsearch.mapping import (
    MOVES,
    WorkerMapping,
    initial_mapping,
    migrate,
    propose_move,
    reverse,
    swap,
    validate_mapping,
)
from hetplan.mapsearch.anneal import SaParams, SaResult, calibrate_temperature, history_csv, sa_search

__all__ = [
    "MOVES",
    "SaParams",
    "SaResult",
    "WorkerMapping",
    "calibrate_temperature",
    "history_csv",
    "initial_mapping",
    "migrate",
    "propose_move",
    "reverse",
    "sa_search",
    "swap",
    "validate_mapping",
]
