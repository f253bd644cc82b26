"""Client-conditional federated learning lab: fingerprint-conditioned training
plus seven baselines over a reproducible, config-driven experiment harness."""

from .config import ExperimentConfig, SuiteConfig
from .experiment import run_experiment, run_suite

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "SuiteConfig", "run_experiment", "run_suite",
           "__version__"]
