"""Generalized DDIM samplers for linear-SDE diffusion models, with exact Gaussian-mixture score oracles."""
from .coeffs import CoefficientTable, MultistepCoeffs, build_multistep, solve_hat_transition, solve_P, solve_R
from .errors import (
    CacheError,
    ConditioningError,
    ConfigError,
    DecompositionError,
    DomainError,
    GddimError,
    InputError,
    InvalidSigmaError,
    ScheduleInconsistentError,
    ScheduleInvalidError,
    SolverAccuracyError,
    StiffnessError,
)
from .oracle import EpsParameterization, ExactEps, GaussianMixture, ScoreOracle, dirac, grid_mixture, single_gaussian
from .process import DiffusionSpec, instantiate_process, marginal_moments, transition
from .samplers import RunResult, SamplerConfig, make_time_grid, run

__version__ = "0.1.0"
