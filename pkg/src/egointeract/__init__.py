"""Ego-object interaction graphs for driver-behaviour classification."""

__version__ = "0.1.0"
