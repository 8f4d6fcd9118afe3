"""Retrospective treatment-effect estimation on panels by matrix completion."""

from ._backend import BACKEND
from .baselines import fit_did, fit_scm, scm_impute
from .covariate_impute import impute_endogenous_covariates
from .errors import RetroPanelError
from .inference import block_bootstrap_ci, estimate_with_ci, placebo_pvalue, rmse_comparison, run_placebo_suite
from .mc_solver import PenaltyConfig, SolverOptions, fit_mc_cv, fit_weighted_mc, soft_threshold_svd
from .panel_data import PanelDataset, build_placebo_dataset, load_panel_csv, write_panel_csv
from .pipeline import PipelineConfig, run_on_dataset, run_pipeline
from .propensity_weights import combine_weights, elapsed_time_profile, fit_treatment_model
from .synthetic_dgp import DgpConfig, generate_panel

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DgpConfig",
    "PanelDataset",
    "PenaltyConfig",
    "PipelineConfig",
    "RetroPanelError",
    "SolverOptions",
    "block_bootstrap_ci",
    "build_placebo_dataset",
    "combine_weights",
    "elapsed_time_profile",
    "estimate_with_ci",
    "fit_did",
    "fit_mc_cv",
    "fit_scm",
    "fit_treatment_model",
    "fit_weighted_mc",
    "generate_panel",
    "impute_endogenous_covariates",
    "load_panel_csv",
    "placebo_pvalue",
    "rmse_comparison",
    "run_on_dataset",
    "run_pipeline",
    "run_placebo_suite",
    "scm_impute",
    "soft_threshold_svd",
    "write_panel_csv",
]
