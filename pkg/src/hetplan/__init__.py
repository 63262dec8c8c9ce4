"""Heterogeneity-aware 3D-parallelism planner for LLM training clusters."""

__version__ = "0.1.0"
