"""End-to-end retrospective estimation on one panel.

Steps for the matrix-completion estimator: impute the covariate on
untreated cells, fit the treatment model, build loss weights, fit the
weighted outcome model and predict treated outcomes on the untreated cells.
DID and synthetic control plug into the same interface so the bootstrap
and the placebo harness can drive any of them.

The functions here accept treatment matrices that are not absorbing, which
happens once columns have been resampled; the original adoption periods
and column indices are passed alongside.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .baselines import fit_did, scm_impute, ScmOptions
from .covariate_impute import impute_endogenous_covariates
from .errors import MissingCounterfactual, NoMissingCells, UsageError
from .mc_solver import McFit, PenaltyConfig, SolverOptions, fit_mc_cv, fit_weighted_mc
from .panel_data import Group, PanelDataset
from .propensity_weights import (
    EPS_W,
    WEIGHT_CAP,
    WEIGHT_FLOOR,
    combine_weights,
    elapsed_time_matrix,
    fit_treatment_model,
)

logger = logging.getLogger(__name__)

ESTIMATORS = ("mc", "did", "scm")


@dataclass
class PipelineConfig:
    estimator: str = "mc"
    use_covariates: Optional[bool] = None
    propensity_weights: bool = True
    elapsed_weights: bool = True
    elapsed_scale: Optional[float] = None
    eps_w: float = EPS_W
    weight_floor: float = WEIGHT_FLOOR
    weight_cap: float = WEIGHT_CAP
    penalties: PenaltyConfig = field(default_factory=PenaltyConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    scm: ScmOptions = field(default_factory=ScmOptions)

    def validate(self, has_covariates: bool = True) -> None:
        if self.estimator not in ESTIMATORS:
            raise UsageError(f"unknown estimator {self.estimator!r}")
        if self.elapsed_weights and not self.propensity_weights and self.estimator == "mc":
            raise UsageError("elapsed-time weighting requires propensity weighting")
        if self.use_covariates is True and not has_covariates and self.estimator == "mc":
            raise UsageError("covariate adjustment requested but the panel has no covariate")
        if not 0 < self.eps_w < 0.5:
            raise UsageError("eps_w must lie in (0, 0.5)")


@dataclass
class Penalties:
    """Penalty levels chosen on the original panel, reused by replicates."""

    covariate: Optional[float] = None
    treatment: Optional[float] = None
    treatment_beta: float = 0.0
    outcome: Optional[float] = None
    outcome_beta: float = 0.0

    def to_dict(self) -> dict:
        return {
            "covariate_lambda_L": self.covariate,
            "treatment_lambda_L": self.treatment,
            "treatment_lambda_beta": self.treatment_beta,
            "outcome_lambda_L": self.outcome,
            "outcome_lambda_beta": self.outcome_beta,
        }


@dataclass
class PipelineResult:
    Y_hat1: np.ndarray
    tau_t: np.ndarray
    tau: float
    penalties: Penalties
    outcome_fit: Optional[McFit] = None
    treatment_fit: object = None
    covariate_fit: object = None
    weights: object = None
    baseline_fit: object = None
    X_hat: Optional[np.ndarray] = None


def effects_from_counterfactual(Y_hat1, Y, W):
    """Per-column mean of ``Y_hat1 - Y`` over untreated cells and its mean.

    Columns without untreated cells get NaN.
    """
    Y = np.asarray(Y, dtype=float)
    miss = np.asarray(W) == 0
    Y_hat1 = np.asarray(Y_hat1, dtype=float)
    if not miss.any():
        raise NoMissingCells("no untreated cells to estimate effects on")
    if not np.isfinite(Y_hat1[miss]).all():
        raise MissingCounterfactual("counterfactual undefined on some untreated cells")
    gap = np.where(miss, Y_hat1 - Y, 0.0)
    counts = miss.sum(axis=0)
    tau_t = np.full(Y.shape[1], np.nan)
    has = counts > 0
    tau_t[has] = gap[:, has].sum(axis=0) / counts[has]
    return tau_t, float(tau_t[has].mean())


def reindex_fit(fit: Optional[McFit], columns) -> Optional[McFit]:
    """A fit's column-indexed parts gathered at ``columns`` (for warm starts)."""
    if fit is None:
        return None
    cols = np.asarray(columns)
    return replace(
        fit,
        L_hat=fit.L_hat[:, cols],
        delta=fit.delta[cols],
        beta=fit.beta[cols],
    )


def _mc_pipeline(Y, W, X, t0_units, n_periods, columns, cfg, pen, init):
    obs = W == 1
    init = init or {}
    X_hat = None
    cov_fit = None
    if cfg.use_covariates:
        cov = impute_endogenous_covariates(
            X, obs, cfg.penalties, pen.covariate, cfg.solver, init=init.get("covariate")
        )
        X_hat = cov.X_hat
        cov_fit = cov.fit
        if cov.fit is not None:
            pen.covariate = cov.fit.lambda_L

    prop = None
    weights = None
    if cfg.propensity_weights:
        prop = fit_treatment_model(
            W,
            X if cfg.use_covariates else None,
            X_hat,
            lambda_L=pen.treatment,
            lambda_phi=pen.treatment_beta,
            eps_w=cfg.eps_w,
            config=cfg.penalties,
            options=cfg.solver,
            init=init.get("treatment"),
        )
        pen.treatment = prop.mc_fit.lambda_L
        pen.treatment_beta = prop.mc_fit.lambda_beta
        t0_arr = np.asarray(t0_units)
        groups = [Group.LATER_TREATED if s >= 0 else Group.ALWAYS_TREATED for s in t0_arr]
        z = None
        if cfg.elapsed_weights:
            z = elapsed_time_matrix(t0_arr, n_periods, cfg.elapsed_scale, columns)
        weights = combine_weights(prop, z, groups, obs, cfg.weight_floor, cfg.weight_cap)

    if pen.outcome is None:
        fit, _ = fit_mc_cv(Y, obs, weights, X_hat, cfg.penalties, cfg.solver)
        pen.outcome = fit.lambda_L
        pen.outcome_beta = fit.lambda_beta
    else:
        fit = fit_weighted_mc(
            Y, obs, weights, X_hat, pen.outcome, pen.outcome_beta, cfg.solver, init=init.get("outcome")
        )
    Y_hat1 = np.where(obs, Y, fit.fitted(X_hat))
    tau_t, tau = effects_from_counterfactual(Y_hat1, Y, W)
    return PipelineResult(
        Y_hat1, tau_t, tau, pen,
        outcome_fit=fit, treatment_fit=prop, covariate_fit=cov_fit, weights=weights, X_hat=X_hat,
    )


def run_pipeline(
    Y,
    W,
    X=None,
    t0_units=None,
    columns=None,
    n_periods: Optional[int] = None,
    config: Optional[PipelineConfig] = None,
    penalties: Optional[Penalties] = None,
    init: Optional[dict] = None,
) -> PipelineResult:
    """Estimate treated outcomes on untreated cells and the implied effects.

    Parameters
    ----------
    Y, W, X : (N, T) arrays
        Outcomes, treatment indicators and optional covariate.
    t0_units : array of int, optional
        Original adoption column per unit (-1 for always treated); inferred
        from ``W`` when omitted. Drives the elapsed-time profile.
    columns : array of int, optional
        Original period index of each column of ``Y``.
    n_periods : int, optional
        Length of the original window (defaults to ``Y.shape[1]``).
    penalties : Penalties, optional
        Fixed penalty levels; any left as None are cross-validated.
    init : dict, optional
        Warm starts keyed by ``"covariate"``, ``"treatment"``, ``"outcome"``.
    """
    cfg = config or PipelineConfig()
    Y = np.asarray(Y, dtype=float)
    W = np.asarray(W).astype(np.int8)
    cfg.validate(X is not None)
    if cfg.use_covariates is None:
        cfg = replace(cfg, use_covariates=X is not None)
    if t0_units is None:
        first = np.where(W.any(axis=1), W.argmax(axis=1), 0)
        t0_units = np.where(first == 0, -1, first)
    n_periods = Y.shape[1] if n_periods is None else int(n_periods)
    pen = replace(penalties) if penalties is not None else Penalties()

    if cfg.estimator == "mc":
        return _mc_pipeline(Y, W, X, t0_units, n_periods, columns, cfg, pen, init)
    if cfg.estimator == "did":
        fit = fit_did(Y, W)
        Y_hat1 = np.where(W == 1, Y, Y + fit.tau)
        tau_t, tau = effects_from_counterfactual(Y_hat1, Y, W)
        return PipelineResult(Y_hat1, tau_t, tau, pen, baseline_fit=fit)
    filled, fits = scm_impute(Y, W == 1, options=cfg.scm)
    tau_t, tau = effects_from_counterfactual(filled, Y, W)
    return PipelineResult(filled, tau_t, tau, pen, baseline_fit=fits)


def run_on_dataset(ds: PanelDataset, config: Optional[PipelineConfig] = None, **kw) -> PipelineResult:
    cfg = config or PipelineConfig()
    ds.require_retrospective()
    X = ds.covariates if cfg.use_covariates is not False else None
    return run_pipeline(ds.outcomes, ds.treatment, X, ds.t0, config=cfg, **kw)


def warm_starts(result: PipelineResult, columns) -> dict:
    """Original-panel fits reindexed to a resample's columns."""
    out = {}
    if result.covariate_fit is not None:
        out["covariate"] = reindex_fit(result.covariate_fit, columns)
    if result.treatment_fit is not None:
        out["treatment"] = reindex_fit(result.treatment_fit.mc_fit, columns)
    if result.outcome_fit is not None:
        out["outcome"] = reindex_fit(result.outcome_fit, columns)
    return out
