"""Asynchronous action-chunk execution with a learned per-step residual correction."""

__version__ = "0.1.0"
