"""Treatment-assignment model and the loss weights derived from it.

The treatment matrix is fitted with the same low-rank plus fixed-effects
machinery as the outcome (full mask, unit weights). Fitted values, clamped
away from 0 and 1, become propensities ``w_hat``; always-treated cells get
the odds weight ``(1 - w_hat) / w_hat`` and later-treated cells the same
ratio after scaling ``w_hat`` by an elapsed-time profile ``z``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import BadPivot, NoMissingCellsWarning, UsageError
from .mc_solver import McFit, PenaltyConfig, SolverOptions, fit_mc_cv, fit_weighted_mc
from .panel_data import Group, as_observed

logger = logging.getLogger(__name__)

EPS_W = 0.05
WEIGHT_FLOOR = 1e-3
WEIGHT_CAP = 1e3


@dataclass
class PropensityFit:
    E_hat: np.ndarray
    phi: np.ndarray
    xi: np.ndarray
    psi: np.ndarray
    w_hat: np.ndarray
    fitted: np.ndarray
    eps_w: float
    mc_fit: McFit
    residual: np.ndarray


def blend_covariates(X, X_hat, treatment) -> np.ndarray:
    """Observed covariate on treated cells, imputed value on untreated cells."""
    X = np.asarray(X, dtype=float)
    X_hat = np.asarray(X_hat, dtype=float)
    return np.where(np.asarray(treatment) == 1, X, X_hat)


def fit_treatment_model(
    treatment,
    X=None,
    X_hat=None,
    lambda_L: Optional[float] = None,
    lambda_phi: float = 0.0,
    eps_w: float = EPS_W,
    config: Optional[PenaltyConfig] = None,
    options: Optional[SolverOptions] = None,
    init: Optional[McFit] = None,
) -> PropensityFit:
    """Low-rank linear model of the treatment indicators.

    ``treatment`` is a PanelDataset or an (N, T) 0/1 array. When
    ``lambda_L`` is None the penalties are chosen by cross-validation.
    """
    W = getattr(treatment, "treatment", treatment)
    W = np.asarray(W, dtype=float)
    if (X is None) != (X_hat is None):
        raise UsageError("X and X_hat must be supplied together")
    Xt = None if X is None else blend_covariates(X, X_hat, W)
    full = np.ones(W.shape, dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoMissingCellsWarning)
        if lambda_L is None:
            fit, _ = fit_mc_cv(W, full, None, Xt, config, options)
        else:
            fit = fit_weighted_mc(W, full, None, Xt, lambda_L, lambda_phi, options, init=init)
    fitted = fit.fitted(Xt)
    return PropensityFit(
        E_hat=fit.L_hat,
        phi=fit.beta,
        xi=fit.gamma,
        psi=fit.delta,
        w_hat=np.clip(fitted, eps_w, 1.0 - eps_w),
        fitted=fitted,
        eps_w=eps_w,
        mc_fit=fit,
        residual=W - fitted,
    )


@dataclass(frozen=True)
class ElapsedTimeProfile:
    z: np.ndarray
    t0: int
    scale: float


def logistic_profile(distance, midpoint: float, scale: float) -> np.ndarray:
    return expit((np.asarray(distance, dtype=float) - midpoint) / scale)


def elapsed_time_profile(T: int, t0: int, scale: Optional[float] = None) -> ElapsedTimeProfile:
    """Logistic weights that dip at ``t0`` and rise with distance from it.

    ``z_t = 1 / (1 + exp(-(|t - t0| - m) / scale))`` with ``m`` half the
    largest distance to either end of the window. Default scale is ``T/10``.
    """
    if not 0 <= t0 < T:
        raise BadPivot(f"pivot {t0} outside [0, {T})")
    scale = T / 10.0 if scale is None else float(scale)
    if scale <= 0:
        raise BadPivot("scale must be positive")
    dist = np.abs(np.arange(T) - t0)
    midpoint = max(t0, T - 1 - t0) / 2.0
    return ElapsedTimeProfile(logistic_profile(dist, midpoint, scale), int(t0), scale)


def elapsed_time_matrix(t0_units, n_periods: int, scale: Optional[float] = None, columns=None) -> np.ndarray:
    """Per-cell ``z`` for every later-treated unit; 1 on always-treated rows.

    ``columns`` maps each column to its original period index (used when
    columns have been resampled); defaults to ``0..T-1``.
    """
    t0_units = np.asarray(t0_units)
    cols = np.arange(n_periods) if columns is None else np.asarray(columns)
    z = np.ones((t0_units.size, cols.size))
    for i, start in enumerate(t0_units):
        if start >= 0:
            prof = elapsed_time_profile(n_periods, int(start), scale)
            z[i] = prof.z[cols]
    return z


@dataclass
class WeightMatrix:
    w_tilde: np.ndarray
    n_clamped_low: int = 0
    n_clamped_high: int = 0

    def diagnostics(self, mask=None) -> dict:
        vals = self.w_tilde if mask is None else self.w_tilde[as_observed(mask)]
        qs = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0]
        return {
            "n_clamped_low": self.n_clamped_low,
            "n_clamped_high": self.n_clamped_high,
            "quantiles": {str(q): float(np.quantile(vals, q)) for q in qs} if vals.size else {},
            "mean": float(vals.mean()) if vals.size else None,
        }


def combine_weights(
    prop,
    profile,
    groups,
    mask,
    weight_floor: float = WEIGHT_FLOOR,
    weight_cap: float = WEIGHT_CAP,
) -> WeightMatrix:
    """Odds weights on observed cells, elapsed-time adjusted for LT units.

    ``prop`` is a PropensityFit or an (N, T) array of propensities;
    ``profile`` an ElapsedTimeProfile, a length-T vector or an (N, T)
    matrix of ``z`` values (ignored on always-treated rows), or None.
    Unobserved cells get weight 0.
    """
    w_hat = np.asarray(getattr(prop, "w_hat", prop), dtype=float)
    obs = as_observed(mask)
    n_units, n_periods = w_hat.shape
    labels = np.array([getattr(g, "value", g) for g in groups])
    if labels.size != n_units or obs.shape != w_hat.shape:
        raise UsageError("weights, groups and mask dimensions disagree")
    lt = labels == Group.LATER_TREATED.value
    if profile is None:
        z = np.ones_like(w_hat)
    else:
        z = np.asarray(getattr(profile, "z", profile), dtype=float)
        z = np.broadcast_to(z, w_hat.shape) if z.ndim == 1 else z
        if z.shape != w_hat.shape:
            raise UsageError("profile dimensions disagree with the panel")
    scaled = np.where(lt[:, None], z * w_hat, w_hat)
    raw = (1.0 - scaled) / scaled
    low = obs & (raw < weight_floor)
    high = obs & (raw > weight_cap)
    w = np.where(obs, np.clip(raw, weight_floor, weight_cap), 0.0)
    n_low, n_high = int(low.sum()), int(high.sum())
    if n_low or n_high:
        logger.debug("clamped %d weights at the floor and %d at the cap", n_low, n_high)
    return WeightMatrix(w, n_low, n_high)
