"""The oneshot-eki package.

Ensemble Kalman inversion (EKI) used as a derivative-free optimizer for
one-shot PDE inverse problems. The unknown parameter and the PDE state are
estimated together; the state is either a finite-element vector or the
output of a small neural network whose weights are trained at the same
time.

Key features include:
- Finite-element forward models on a 1D grid and a 2D triangulation.
- The continuous-time EKI flow with an adaptive Dormand-Prince integrator.
- Penalty schedules for the model constraint, both discrete and as a flow.
- Reduced Tikhonov, reduced EKI and finite-difference BFGS baselines.
- Config-driven experiment runs with reproducible artifact directories.
"""

from .settings import Settings  # noqa: I001

from .config_loader import ConfigLoader
from .config_schema import ExperimentConfig, RuntimeOptions
from .core import Ensemble, GaussianPrior, WeightedMetric
from .eki import InverseProblemSpec, NoiseBlock, integrate_eki
from .oneshot import AugmentedSystem, algorithm1, algorithm2
from .experiments import compare_runs, run_experiment
from . import logging_config

__all__ = [
    "AugmentedSystem",
    "ConfigLoader",
    "Ensemble",
    "ExperimentConfig",
    "GaussianPrior",
    "InverseProblemSpec",
    "NoiseBlock",
    "RuntimeOptions",
    "Settings",
    "WeightedMetric",
    "algorithm1",
    "algorithm2",
    "compare_runs",
    "integrate_eki",
    "run_experiment",
]

# Library-level logger
logger = logging_config.get_logger(__name__)
