"""Merge-road traffic toolkit: macroscopic and microscopic models of mixed-autonomy merges."""

__version__ = "0.1.0"
