"""Progressive representation weaving: routed low-rank KV experts trained stage by stage."""

__version__ = "0.1.0"
