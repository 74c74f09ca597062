"""Staged simulation models: a Markovian epidemic and a max-stable
spatial extremes process."""

from . import extremes, sir

__all__ = ["sir", "extremes"]
