"""OORL: on-policy RL with a rule reward combined with group equivalent preference optimization."""

__version__ = "0.1.0"
