"""Cyclic spatio-temporal scheduling of periodic training jobs on shared node groups."""

__version__ = "0.1.0"
