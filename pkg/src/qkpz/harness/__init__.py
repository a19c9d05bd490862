"""Configuration, statistics, experiments, artifacts and the command line."""
from .config import ConfigError, ExperimentConfig
from .experiments import (run_convergence_experiment, run_exact_mean_experiment, run_experiment,
                          run_martingale_experiment, run_moment_experiment)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "run_convergence_experiment",
    "run_exact_mean_experiment",
    "run_experiment",
    "run_martingale_experiment",
    "run_moment_experiment",
]
