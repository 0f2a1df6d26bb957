"""Amplifier-aware downlink power allocation for cell-free massive MIMO."""

from .kernels import BACKEND
from .scenario import (ScenarioConfig, Scenario, generate_geometry,
                       one_ring_covariance, build_covariances, sample_channels,
                       save_scenario, load_scenario)
from .statistics import (EstimationModel, EffectiveStatistics, estimate_channels,
                         select_service_set, pmmse_precoders, estimate_expectations,
                         build_statistics, save_statistics, load_statistics)
from .problem import (ProblemData, PowerAllocation, assemble, gather_ap,
                      transmit_power, transmit_powers, consumed_power, sinr,
                      constraint_g, constraint_values, penalty_terms,
                      penalized_cost, relative_saving)
from .solver import (SolverOptions, SolverResult, smoothed_norm, gradient,
                     project, armijo_step, apg_minimize, penalty_minimize,
                     feasibility_options)
from .oracle import (OracleReport, FeasibilityReport, MaxMinReport,
                     single_link_closed_form, grid_search, check_feasibility,
                     max_min_sinr)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ScenarioConfig", "Scenario", "generate_geometry",
    "one_ring_covariance", "build_covariances", "sample_channels",
    "save_scenario", "load_scenario", "EstimationModel", "EffectiveStatistics",
    "estimate_channels", "select_service_set", "pmmse_precoders",
    "estimate_expectations", "build_statistics", "save_statistics",
    "load_statistics", "ProblemData", "PowerAllocation", "assemble",
    "gather_ap", "transmit_power", "transmit_powers", "consumed_power", "sinr",
    "constraint_g", "constraint_values", "penalty_terms", "penalized_cost",
    "relative_saving", "SolverOptions", "SolverResult", "smoothed_norm",
    "gradient", "project", "armijo_step", "apg_minimize", "penalty_minimize",
    "feasibility_options", "OracleReport", "FeasibilityReport", "MaxMinReport",
    "single_link_closed_form", "grid_search", "check_feasibility",
    "max_min_sinr", "__version__",
]
