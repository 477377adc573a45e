"""Deterministic discrete-event simulator for BFT replication protocols."""

from .edf import ExperimentSpec, parse_edf, parse_edf_text
from .engine import Simulator
from .runner import RunResult, run_batch, run_experiment

__all__ = ["ExperimentSpec", "parse_edf", "parse_edf_text", "Simulator", "RunResult",
           "run_batch", "run_experiment"]
__version__ = "0.1.0"
