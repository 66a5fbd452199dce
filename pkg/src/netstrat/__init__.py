"""Bayesian analysis of clustered encouragement designs with friendship spillovers.

The package models three linked pieces: latent compliance strata for a
three-arm encouragement, a friends'-uptake mediator read off a within-class
network, and a zero-inflated Poisson outcome. Posterior inference runs on a
self-contained no-U-turn sampler, and causal summaries are produced by
re-imputing strata and potential outcomes draw by draw.
"""

from .data import (
    ClassRoom,
    CovariateSpec,
    FriendshipNetwork,
    Student,
    StudyData,
    ValidationError,
    cluster_ratio_mean,
    load_study,
    neighbor_share,
    validation_report,
    write_study,
)
from .strata import (
    STRATUM_CODES,
    MomEstimate,
    PrincipalStratum,
    compatible_strata,
    mom_estimate,
    potential_treatment,
)
from .model import (
    ParamSpace,
    Parameters,
    PriorConfig,
    grad_log_posterior,
    log_likelihood,
    log_prior,
    make_posterior,
    poisson_mean,
    strata_probs,
    zip_log_pmf,
)
from .sampler import Diagnostics, Draws, SamplerConfig, diagnose, sample
from .estimands import (
    AugmentedDraw,
    EstimandSummary,
    effect_cde,
    effect_cse,
    effect_nde,
    effect_nie,
    effect_pce,
    homophily_matrix,
    impute_outcome,
    impute_strata,
    potential_mediator,
    stratum_profiles,
    summarize,
)
from .simulate import GroundTruth, SimConfig, brute_force_likelihood, generate, oracle_estimands

__version__ = "0.1.0"

__all__ = [
    "AugmentedDraw",
    "ClassRoom",
    "CovariateSpec",
    "Diagnostics",
    "Draws",
    "EstimandSummary",
    "FriendshipNetwork",
    "GroundTruth",
    "MomEstimate",
    "ParamSpace",
    "Parameters",
    "PrincipalStratum",
    "PriorConfig",
    "STRATUM_CODES",
    "SamplerConfig",
    "SimConfig",
    "Student",
    "StudyData",
    "ValidationError",
    "brute_force_likelihood",
    "cluster_ratio_mean",
    "compatible_strata",
    "diagnose",
    "effect_cde",
    "effect_cse",
    "effect_nde",
    "effect_nie",
    "effect_pce",
    "generate",
    "grad_log_posterior",
    "homophily_matrix",
    "impute_outcome",
    "impute_strata",
    "load_study",
    "log_likelihood",
    "log_prior",
    "make_posterior",
    "mom_estimate",
    "neighbor_share",
    "oracle_estimands",
    "poisson_mean",
    "potential_mediator",
    "potential_treatment",
    "sample",
    "strata_probs",
    "stratum_profiles",
    "summarize",
    "validation_report",
    "write_study",
    "zip_log_pmf",
]
