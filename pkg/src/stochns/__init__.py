"""Spectral simulation and diagnostics for stochastic 2D Navier-Stokes on the torus.

Covers a Galerkin truncation with multiplicative noise, nudged coupling
copies, decay and moment diagnostics, and ergodicity estimators.
"""

from .config import ExperimentSpec, load_config, parse_config
from .dynamics import NudgeConfig, SimConfig, run_ensemble, step_pair, step_single
from .errors import (BasisMismatchError, ConfigError, IntegrationBlowup, ShrinkWindowError,
                     StochNSError)
from .experiments import run_experiment
from .noise import NoiseModel, growth_constants
from .spectral import Basis, SpectralField, build_basis

__version__ = "0.1.0"

__all__ = [
    "Basis", "BasisMismatchError", "ConfigError", "ExperimentSpec", "IntegrationBlowup", "NoiseModel",
    "NudgeConfig", "ShrinkWindowError", "SimConfig", "SpectralField", "StochNSError", "build_basis",
    "growth_constants", "load_config", "parse_config", "run_ensemble", "run_experiment", "step_pair",
    "step_single",
]
