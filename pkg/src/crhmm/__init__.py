"""Capture-recapture hidden Markov models for register-based population inference."""
from .blb import BlbOptions, BlbPlan, BlbResult, make_subsets, resample_weights, run_blb
from .config import RunConfig, load_config
from .covariates import CovariateScheme, Dimension
from .decoder import (Decoding, DecodedTrajectory, conditional_register_probability,
                      marginal_register_probability, mixture_marginal, viterbi_batch, viterbi_path)
from .emission import EventRecording
from .engine import Objective
from .errors import BlbError, ConfigError, CRHMMError, DataError, DecodingError, DomainError, NumericError
from .estimator import FitOptions, FitResult, fit_mle, hessian_standard_errors, numerical_gradient
from .likelihood import (forward_loglik_individual, mixture_loglik_individual, posterior_mixture_weights,
                         total_loglik)
from .model import ModelSpec
from .population import PopulationSeries, overcoverage, population_size
from .records import Record, RecordBatch
from .simulator import GroundTruth, SimulationConfig, simulate_population, truth_population_series
from .statespace import (build_transition_matrix_case, build_transition_matrix_general, general3,
                         life_event_probability, preset, sweden8)

__version__ = "0.1.0"

__all__ = [
    "BlbError",
    "BlbOptions",
    "BlbPlan",
    "BlbResult",
    "CRHMMError",
    "ConfigError",
    "CovariateScheme",
    "DataError",
    "DecodedTrajectory",
    "Decoding",
    "DecodingError",
    "Dimension",
    "DomainError",
    "EventRecording",
    "FitOptions",
    "FitResult",
    "GroundTruth",
    "ModelSpec",
    "NumericError",
    "Objective",
    "PopulationSeries",
    "Record",
    "RecordBatch",
    "RunConfig",
    "SimulationConfig",
    "build_transition_matrix_case",
    "build_transition_matrix_general",
    "conditional_register_probability",
    "fit_mle",
    "forward_loglik_individual",
    "general3",
    "hessian_standard_errors",
    "life_event_probability",
    "load_config",
    "make_subsets",
    "marginal_register_probability",
    "mixture_loglik_individual",
    "mixture_marginal",
    "numerical_gradient",
    "overcoverage",
    "population_size",
    "posterior_mixture_weights",
    "preset",
    "resample_weights",
    "run_blb",
    "simulate_population",
    "sweden8",
    "total_loglik",
    "truth_population_series",
    "viterbi_batch",
    "viterbi_path",
]
