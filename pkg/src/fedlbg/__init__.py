"""Deterministic federated-learning simulator with look-back gradient
recycling, stackable gradient compressors, and gradient-space PCA analysis.
"""

from .fl_core import run_vanilla, run_with_policy
from .harness import ExperimentConfig, parse_config, run
from .lbgm import run_lbgm, run_lbgm_sampled

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "run",
    "run_vanilla",
    "run_with_policy",
    "run_lbgm",
    "run_lbgm_sampled",
    "__version__",
]
