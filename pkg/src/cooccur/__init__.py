"""Grouping by learned co-occurrence affinity."""

__version__ = "0.1.0"
