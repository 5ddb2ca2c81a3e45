"""Identification of nonlinear linear-fractional (NL-LFR) state-space models.

The workflow has three stages: a guided residual search that infers the
latent residual signal and its coupling to the linear dynamics, static
training of the residual network on the inferred samples, and joint
refinement of all parameters by multiple shooting.
"""
from .data_io import (IoDataset, SyntheticSpec, fit_linear_init, generate_synthetic, load_csv,
                      normalize, save_csv)
from .errors import (ConfigError, DataFormatError, DimensionError, DivergenceError,
                     ExcitationError, NllfrError, StabilityError)
from .lti_core import LtiSubmodel, build_window_operators, simulate_lti
from .nllfr_model import (NllfrModel, load_model, nrmse, rmse, save_model, shift_diagnostic,
                          simulate)
from .pipeline import PipelineConfig, compare_shooting, identify, run_scenario
from .residual_search import ResidualSearchConfig, bilevel_search, inner_sweep
from .shooting import ShootingConfig, solve
from .static_net import TrainConfig, init_residual_map, train_residual

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataFormatError", "DimensionError", "DivergenceError", "ExcitationError",
    "IoDataset", "LtiSubmodel", "NllfrError", "NllfrModel", "PipelineConfig",
    "ResidualSearchConfig", "ShootingConfig", "StabilityError", "SyntheticSpec", "TrainConfig",
    "bilevel_search", "build_window_operators", "compare_shooting", "fit_linear_init",
    "generate_synthetic", "identify", "init_residual_map", "inner_sweep", "load_csv",
    "load_model", "normalize", "nrmse", "rmse", "run_scenario", "save_csv", "save_model",
    "shift_diagnostic", "simulate", "simulate_lti", "solve", "train_residual",
]
