"""Dual-stream no-reference quality assessment for stained tissue patches."""

__version__ = "0.1.0"
