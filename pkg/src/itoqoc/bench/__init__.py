"""Experiment sweeps with deterministic CSV/JSON outputs."""
from .config import ExperimentConfig, OptimizerSettings, PropagatorSettings, resolve_config
from .runner import cell_seed, read_csv, run_experiment, write_csv

__all__ = [
    "ExperimentConfig",
    "OptimizerSettings",
    "PropagatorSettings",
    "resolve_config",
    "cell_seed",
    "read_csv",
    "run_experiment",
    "write_csv",
]
