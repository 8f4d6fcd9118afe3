"""Impute covariate values on the cells where they may be treatment-affected.

The covariate panel is completed like an outcome (unit weights, no
covariates of its own) with the later-treated pre-period cells hidden, so
that the outcome and treatment models can use covariate values on the
treated scale throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._io import atomic_write_text, rows_csv
from .mc_solver import McFit, PenaltyConfig, SolverOptions, fit_mc_cv, fit_weighted_mc
from .panel_data import as_observed


@dataclass
class ImputedCovariates:
    X_hat: np.ndarray
    imputed_mask: np.ndarray
    fit: Optional[McFit]

    @property
    def fit_diagnostics(self) -> dict:
        return {} if self.fit is None else self.fit.summary()

    def write_csv(self, path, unit_ids, period_ids) -> None:
        rows = []
        for i, unit in enumerate(unit_ids):
            for t, period in enumerate(period_ids):
                rows.append((unit, period, float(self.X_hat[i, t]), int(self.imputed_mask[i, t])))
        atomic_write_text(path, rows_csv(["unit", "period", "covariate", "imputed"], rows))


def impute_endogenous_covariates(
    X,
    mask,
    penalties: Optional[PenaltyConfig] = None,
    lambda_L: Optional[float] = None,
    options: Optional[SolverOptions] = None,
    init: Optional[McFit] = None,
) -> ImputedCovariates:
    """Replace covariate values on unobserved cells with completed values.

    Penalties come from cross-validation unless ``lambda_L`` is fixed.
    Observed cells pass through unchanged.
    """
    X = np.asarray(X, dtype=float)
    obs = as_observed(mask)
    imputed = ~obs
    if not imputed.any():
        return ImputedCovariates(X.copy(), imputed, None)
    if lambda_L is None:
        fit, _ = fit_mc_cv(X, obs, None, None, penalties, options)
    else:
        fit = fit_weighted_mc(X, obs, None, None, lambda_L, 0.0, options, init=init)
    X_hat = np.where(obs, X, fit.fitted())
    return ImputedCovariates(X_hat, imputed, fit)
