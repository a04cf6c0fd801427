"""Latent-factor models for multivariate diffusions observed at high
frequency: realised covariance, minimum-contrast parameter estimation with
asymptotic standard errors, a chi-squared test for the number of factors,
and a Monte Carlo replication harness.
"""

__version__ = "0.1.0"

from .estimator import (
    FitOptions,
    FitResult,
    RealisedCov,
    contrast,
    contrast_grad,
    default_bounds,
    default_init,
    fit,
    parameter_box,
    quasi_loglik_excess,
    realised_cov,
)
from .hypothesis_test import (
    SelectionResult,
    TestResult,
    UntestableError,
    chi2_quantile,
    chi2_sf,
    max_testable_k,
    select_k,
    test_k,
)
from .matrixcalc import (
    duplication,
    duplication_pinv,
    kron,
    unvec,
    unvech,
    vec,
    vech,
)
from .model import (
    CovStructure,
    ModelSpec,
    ParamVector,
    WeightMatrixError,
    cov_structure,
    delta_jacobian,
    loading_matrix,
    pack,
    sigma_of_theta,
    unpack,
    weight_matrix,
)
from .montecarlo import (
    Aggregate,
    Experiment,
    figure_data,
    replication_seed,
    run,
    theoretical_sd_table,
    write_outputs,
)
from .sde import (
    DriftSpec,
    SamplePath,
    SimConfig,
    SimulationError,
    exact_ou_step,
    exact_ou_transition,
    implied_params,
    path_from_binary,
    path_from_csv,
    path_to_binary,
    path_to_csv,
    simulate,
)

__all__ = [
    "Aggregate",
    "CovStructure",
    "DriftSpec",
    "Experiment",
    "FitOptions",
    "FitResult",
    "ModelSpec",
    "ParamVector",
    "RealisedCov",
    "SamplePath",
    "SelectionResult",
    "SimConfig",
    "SimulationError",
    "TestResult",
    "UntestableError",
    "WeightMatrixError",
    "chi2_quantile",
    "chi2_sf",
    "contrast",
    "contrast_grad",
    "cov_structure",
    "default_bounds",
    "default_init",
    "delta_jacobian",
    "duplication",
    "duplication_pinv",
    "exact_ou_step",
    "exact_ou_transition",
    "figure_data",
    "fit",
    "implied_params",
    "kron",
    "loading_matrix",
    "max_testable_k",
    "pack",
    "parameter_box",
    "path_from_binary",
    "path_from_csv",
    "path_to_binary",
    "path_to_csv",
    "quasi_loglik_excess",
    "realised_cov",
    "replication_seed",
    "run",
    "select_k",
    "sigma_of_theta",
    "simulate",
    "test_k",
    "theoretical_sd_table",
    "unpack",
    "unvec",
    "unvech",
    "vec",
    "vech",
    "weight_matrix",
    "write_outputs",
]
