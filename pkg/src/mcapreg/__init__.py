"""Multilevel covariate-assisted principal regression.

Estimates cluster-specific projection directions of covariance-matrix
outcomes on the unit sphere together with a log-linear mixed model for the
projected variances, with sequential component extraction, bootstrap and
asymptotic inference, and a Monte-Carlo benchmark harness.
"""

__version__ = "0.1.0"

from .components import ComponentSet, MCAPComponents, deflate_cov, deflate_unit, dfd, fit_component, select_k
from .data import (
    ClusterNormalizer,
    HierarchicalDataset,
    UnitData,
    compute_normalizers,
    compute_sample_cov,
    load_long_csv,
    load_precomputed,
    validate,
)
from .errors import DataValidationError, DegenerateClusterError, EstimatorError, InferenceError, McapError
from .estimator import (
    FitConfig,
    FitResult,
    MCAPRegression,
    fit,
    newton_update_block,
    update_gamma_i,
    update_hyperparams,
    update_vmf_block,
)
from .inference import (
    AsymptoticIntervals,
    BootstrapResult,
    ProfileInformation,
    ReducedFit,
    asymptotic_ci,
    bootstrap,
    commutation_matrix,
    profile_information,
    reduced_fit,
)
from .likelihood import (
    MCAPParams,
    direction_quadratic,
    grad_beta0i,
    grad_beta1,
    grad_beta2i,
    hess_beta0i,
    hess_beta1,
    hess_beta2i,
    linear_predictor,
    neg_hlik,
    neg_hlik_parts,
)
from .simulation import ScapResult, SimConfig, SimTruth, StudyConfig, generate, run_scap, run_study
from .vmf import VmfParams, estimate_vmf, log_bessel_i, log_cp, mean_resultant_ratio, sample_vmf, vmf_log_density

__all__ = [
    "__version__",
    "ClusterNormalizer",
    "ComponentSet",
    "HierarchicalDataset",
    "UnitData",
    "compute_normalizers",
    "compute_sample_cov",
    "load_long_csv",
    "load_precomputed",
    "validate",
    "DataValidationError",
    "DegenerateClusterError",
    "EstimatorError",
    "InferenceError",
    "McapError",
    "FitConfig",
    "FitResult",
    "MCAPRegression",
    "MCAPComponents",
    "fit",
    "newton_update_block",
    "update_gamma_i",
    "update_hyperparams",
    "update_vmf_block",
    "deflate_cov",
    "deflate_unit",
    "dfd",
    "fit_component",
    "select_k",
    "AsymptoticIntervals",
    "BootstrapResult",
    "ProfileInformation",
    "ReducedFit",
    "asymptotic_ci",
    "bootstrap",
    "commutation_matrix",
    "profile_information",
    "reduced_fit",
    "MCAPParams",
    "direction_quadratic",
    "grad_beta0i",
    "grad_beta1",
    "grad_beta2i",
    "hess_beta0i",
    "hess_beta1",
    "hess_beta2i",
    "linear_predictor",
    "neg_hlik",
    "neg_hlik_parts",
    "ScapResult",
    "SimConfig",
    "SimTruth",
    "StudyConfig",
    "generate",
    "run_scap",
    "run_study",
    "VmfParams",
    "estimate_vmf",
    "log_bessel_i",
    "log_cp",
    "mean_resultant_ratio",
    "sample_vmf",
    "vmf_log_density",
]
