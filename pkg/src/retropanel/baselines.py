"""Difference-in-differences and synthetic control benchmarks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend
from ._io import dumps
from .errors import CollinearTreatment, DimensionMismatch, UsageError
from .panel_data import PanelDataset, as_observed

logger = logging.getLogger(__name__)


@dataclass
class DidFit:
    tau: float
    gamma: np.ndarray
    delta: np.ndarray
    residual_sse: float

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "gamma": self.gamma,
            "delta": self.delta,
            "residual_sse": self.residual_sse,
        }


def _arrays(ds_or_Y, W):
    if isinstance(ds_or_Y, PanelDataset):
        return ds_or_Y.outcomes, ds_or_Y.treatment.astype(float)
    if W is None:
        raise UsageError("treatment matrix required")
    return np.asarray(ds_or_Y, dtype=float), np.asarray(W, dtype=float)


def fit_did(ds_or_Y, W=None, tol: float = 1e-10) -> DidFit:
    """Two-way fixed effects regression of outcomes on the treatment indicator.

    Uses the within transformation (alternating unit/time demeaning) and a
    single residual regression for ``tau``; effects are then recovered from
    ``Y - tau W`` with ``sum(gamma) = 0``.
    """
    Y, W = _arrays(ds_or_Y, W)
    if Y.shape != W.shape:
        raise DimensionMismatch("Y and W shapes differ")
    if W.min() == W.max():
        raise CollinearTreatment("treatment has no variation")
    Yd, _ = _backend.twoway_demean(Y, tol)
    Wd, _ = _backend.twoway_demean(W, tol)
    ww = float((Wd * Wd).sum())
    if ww <= 1e-12 * W.size:
        raise CollinearTreatment("treatment is collinear with the fixed effects")
    tau = float((Wd * Yd).sum()) / ww
    R = Y - tau * W
    gamma = R.mean(axis=1) - R.mean()
    delta = R.mean(axis=0)
    resid = R - gamma[:, None] - delta[None, :]
    return DidFit(tau, gamma, delta, float((resid * resid).sum()))


def did_counterfactual(fit: DidFit, Y, W) -> np.ndarray:
    """Treated outcome on untreated cells as ``Y + tau``; NaN elsewhere."""
    Y = np.asarray(Y, dtype=float)
    return np.where(np.asarray(W) == 0, Y + fit.tau, np.nan)


def did_impute(Y, mask, tol: float = 1e-12, max_sweeps: int = 10000) -> np.ndarray:
    """Fill unobserved cells with unit plus time effects fitted on observed cells."""
    Y = np.asarray(Y, dtype=float)
    obs = as_observed(mask)
    w = np.ascontiguousarray(obs.astype(float))
    R = np.ascontiguousarray(np.where(obs, Y, 0.0))
    gamma = np.zeros(Y.shape[0])
    delta = np.zeros(Y.shape[1])
    _backend.fe_sweeps(R, w, gamma, delta, max_sweeps, tol)
    return np.where(obs, Y, gamma[:, None] + delta[None, :])


@dataclass
class ScmFit:
    omega: np.ndarray
    converged: bool
    iterations: int
    pre_fit_mse: float
    objective_trace: np.ndarray = field(repr=False, default=None)
    sum_error_trace: np.ndarray = field(repr=False, default=None)
    min_weight_trace: np.ndarray = field(repr=False, default=None)
    grad_max_trace: np.ndarray = field(repr=False, default=None)
    tol: float = 1e-3
    grad_clip: float = 5.0

    def to_dict(self) -> dict:
        return {
            "omega": self.omega,
            "converged": self.converged,
            "iterations": self.iterations,
            "pre_fit_mse": self.pre_fit_mse,
        }


@dataclass
class ScmOptions:
    eta: float = 0.1
    grad_clip: float = 5.0
    tol: float = 1e-3
    max_iter: int = 10000
    max_halvings: int = 40


def fit_scm(treated_pre, controls_pre, options: Optional[ScmOptions] = None) -> ScmFit:
    """Simplex-weighted regression of one treated series on control series.

    ``controls_pre`` is (N_c, T0). Solved by exponentiated gradient from
    uniform weights with clipped gradients and step halving; the full
    iterate diagnostics are kept on the returned fit.
    """
    opts = options or ScmOptions()
    y = np.asarray(treated_pre, dtype=float).ravel()
    C = np.atleast_2d(np.asarray(controls_pre, dtype=float))
    if C.shape[0] < 1:
        raise DimensionMismatch("need at least one control")
    if C.shape[1] != y.size or y.size < 1:
        raise DimensionMismatch(f"controls have {C.shape[1]} periods, treated has {y.size}")
    omega, n_iter, converged, obj, sum_err, min_w, gmax = _backend.scm_eg(
        y, C, opts.eta, opts.grad_clip, opts.tol, opts.max_iter, opts.max_halvings
    )
    if not converged:
        logger.info("synthetic control stopped at %d iterations without converging", n_iter)
    return ScmFit(
        omega=np.asarray(omega),
        converged=bool(converged),
        iterations=int(n_iter),
        pre_fit_mse=float(obj[-1]) / y.size,
        objective_trace=obj,
        sum_error_trace=sum_err,
        min_weight_trace=min_w,
        grad_max_trace=gmax,
        tol=opts.tol,
        grad_clip=opts.grad_clip,
    )


def scm_predict(fit: ScmFit, controls_all) -> np.ndarray:
    C = np.atleast_2d(np.asarray(controls_all, dtype=float))
    if C.shape[0] != fit.omega.size:
        raise DimensionMismatch(f"{C.shape[0]} control rows for {fit.omega.size} weights")
    return fit.omega @ C


def scm_impute(Y, mask, control_rows=None, options: Optional[ScmOptions] = None):
    """Fill each row's unobserved cells from a synthetic control.

    Each row with missing cells is fitted on its observed columns against
    the fully observed control rows and predicted on its missing columns.
    Returns the filled matrix and the per-row fits.
    """
    Y = np.asarray(Y, dtype=float)
    obs = as_observed(mask)
    if control_rows is None:
        control_rows = np.flatnonzero(obs.all(axis=1))
    control_rows = np.asarray(control_rows)
    if control_rows.size == 0:
        raise DimensionMismatch("no fully observed control rows")
    out = Y.copy()
    fits = {}
    for i in np.flatnonzero(~obs.all(axis=1)):
        seen = obs[i]
        if not seen.any():
            raise DimensionMismatch(f"row {i} has no observed periods to fit on")
        fit = fit_scm(Y[i, seen], Y[np.ix_(control_rows, seen)], options)
        out[i, ~seen] = scm_predict(fit, Y[np.ix_(control_rows, ~seen)])
        fits[int(i)] = fit
    return out, fits


def fits_to_json(fits) -> str:
    if isinstance(fits, DidFit):
        return dumps({"estimator": "did", **fits.to_dict()})
    return dumps({"estimator": "scm", "units": {str(k): v.to_dict() for k, v in fits.items()}})
