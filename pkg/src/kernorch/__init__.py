"""Operator fission, exhaustive kernel identification and optimal kernel orchestration."""

__version__ = "0.1.0"
