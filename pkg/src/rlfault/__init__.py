"""Search-based functional-fault testing for deep RL policies."""

__version__ = "0.1.0"
