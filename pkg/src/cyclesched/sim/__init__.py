"""Trace-driven simulation of shared node groups under four placement policies."""

from .config import Policy, SimConfig
from .engine import Simulator, run_simulation
from .metrics import SimReport, bubble_ratio, check_schedule, compute_metrics, delay_cdf

__all__ = [
    "Policy",
    "SimConfig",
    "SimReport",
    "Simulator",
    "bubble_ratio",
    "check_schedule",
    "compute_metrics",
    "delay_cdf",
    "run_simulation",
]
