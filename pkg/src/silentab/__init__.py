"""Patience estimation for queues where some abandonments are silent."""

__version__ = "0.1.0"
