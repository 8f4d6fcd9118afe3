"""Weighted nuclear-norm matrix completion with two-way fixed effects.

The model for an observed cell is ``Y_it = L_it + X_it . beta_t + gamma_i +
delta_t + noise`` and the estimator minimises

    (1/|O|) sum_{(i,t) in O} w_it (Y_it - L_it - X_it beta_t - gamma_i - delta_t)^2
        + lambda_L ||L||_* + lambda_beta ||beta||_1

by block-coordinate descent. The fixed-effect and coefficient blocks are
minimised exactly; the low-rank block takes a majorize-minimize step
(singular value thresholding of the weighted, gap-filled residual) from an
extrapolated point. An extrapolated step that would raise the objective is
replaced by a plain step and the momentum is reset, so the objective trace
never increases.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from . import _backend
from ._io import matrix_csv, atomic_write_text, dumps
from .errors import (
    CovariateMismatch,
    DegenerateWeights,
    EmptyGrid,
    FoldTooSmall,
    NoMissingCellsWarning,
    NonConvergence,
    RankTooLow,
    SvdFailure,
)
from .panel_data import Group, as_observed

logger = logging.getLogger(__name__)

RANK_TOL = 1e-7


def soft_threshold_svd(M, lam: float):
    """Proximal operator of ``lam * ||.||_*``.

    Returns the shrunk matrix ``U diag(max(s - lam, 0)) V^T`` and the shrunk
    singular values (nonincreasing, same length as ``min(M.shape)``).
    """
    M = np.asarray(M, dtype=float)
    if lam < 0:
        raise ValueError("threshold must be nonnegative")
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdFailure(
            f"SVD did not converge for {M.shape} matrix "
            f"(finite={np.isfinite(M).all()}, max|M|={np.nanmax(np.abs(M)):.3g})"
        ) from exc
    shrunk = np.maximum(s - lam, 0.0)
    k = int(np.count_nonzero(shrunk))
    out = (U[:, :k] * shrunk[:k]) @ Vt[:k]
    return out, shrunk


@dataclass
class SolverOptions:
    max_iter: int = 500
    tol: float = 1e-5
    param_tol: float = 1e-4
    accelerate: bool = True
    beta_rounds: int = 50
    fe_max_sweeps: int = 200
    fe_tol: float = 1e-12
    weight_floor: float = 1e-3
    strict: bool = False


@dataclass
class McFit:
    L_hat: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    beta: np.ndarray
    singular_values: np.ndarray
    rank: int
    lambda_L: float
    lambda_beta: float
    objective_trace: np.ndarray
    converged: bool
    n_iter: int
    has_covariates: bool = False

    def fixed_effects(self) -> np.ndarray:
        return self.gamma[:, None] + self.delta[None, :]

    def covariate_term(self, X) -> np.ndarray:
        if not self.has_covariates:
            if X is not None and np.any(self.beta):
                raise CovariateMismatch("fit has no covariates")
            return np.zeros_like(self.L_hat)
        if X is None:
            raise CovariateMismatch("fit used covariates; X_hat is required")
        return _covariate_term(_as_3d(X, self.L_hat.shape), self._beta_2d())

    def fitted(self, X=None) -> np.ndarray:
        """Model value ``L + X beta + gamma + delta`` on every cell."""
        return self.L_hat + self.covariate_term(X) + self.fixed_effects()

    def _beta_2d(self) -> np.ndarray:
        return self.beta if self.beta.ndim == 2 else self.beta[:, None]

    def summary(self) -> dict:
        return {
            "lambda_L": self.lambda_L,
            "lambda_beta": self.lambda_beta,
            "rank": self.rank,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "singular_values": self.singular_values,
            "final_objective": float(self.objective_trace[-1]),
        }

    def to_dict(self) -> dict:
        return {
            "lambda_L": self.lambda_L,
            "lambda_beta": self.lambda_beta,
            "rank": self.rank,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "singular_values": self.singular_values,
            "gamma": self.gamma,
            "delta": self.delta,
            "beta": self.beta,
            "objective_trace": self.objective_trace,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def write_L_csv(self, path, unit_ids=None, period_ids=None) -> None:
        atomic_write_text(path, matrix_csv(self.L_hat, unit_ids, period_ids))


def _as_3d(X, shape) -> Optional[np.ndarray]:
    if X is None:
        return None
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.shape[:2] != tuple(shape):
        raise CovariateMismatch(f"covariate shape {X.shape[:2]} != panel shape {tuple(shape)}")
    return X


def _covariate_term(X3, beta2) -> np.ndarray:
    return np.einsum("itp,tp->it", X3, beta2)


def _rank(s: np.ndarray) -> int:
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.count_nonzero(s > RANK_TOL * s[0]))


def _soft(x, thr):
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def _update_beta(X3, beta, resid, w, lam_scaled):
    """One cyclic coordinate pass of the per-period weighted lasso.

    ``resid`` is the residual excluding the covariate term; ``lam_scaled``
    is ``lambda_beta * |O| / 2``.
    """
    n_cov = X3.shape[2]
    if n_cov == 1:
        x = X3[:, :, 0]
        wx = w * x
        num = (wx * resid).sum(axis=0)
        den = (wx * x).sum(axis=0)
        ok = den > 0
        beta[:, 0] = np.where(ok, _soft(num, lam_scaled) / np.where(ok, den, 1.0), 0.0)
        return
    partial = resid - _covariate_term(X3, beta)
    for p in range(n_cov):
        x = X3[:, :, p]
        partial += x * beta[None, :, p]
        wx = w * x
        num = (wx * partial).sum(axis=0)
        den = (wx * x).sum(axis=0)
        ok = den > 0
        beta[:, p] = np.where(ok, _soft(num, lam_scaled) / np.where(ok, den, 1.0), 0.0)
        partial -= x * beta[None, :, p]


def fit_weighted_mc(
    Y,
    mask,
    weights=None,
    X=None,
    lambda_L: float = 0.0,
    lambda_beta: float = 0.0,
    options: Optional[SolverOptions] = None,
    init: Optional[McFit] = None,
) -> McFit:
    """Fit the weighted low-rank plus fixed-effects model on observed cells.

    Parameters
    ----------
    Y : (N, T) array
        Outcomes; only observed cells are read.
    mask : ObservationMask or bool array
        Observed cells.
    weights : WeightMatrix or (N, T) array, optional
        Per-cell loss weights, strictly positive on observed cells. Unit
        weights when omitted.
    X : (N, T) or (N, T, P) array, optional
        Covariates with period-specific coefficients.
    init : McFit, optional
        Warm start.
    """
    opts = options or SolverOptions()
    Y = np.asarray(Y, dtype=float)
    obs = as_observed(mask)
    n_units, n_periods = Y.shape
    if obs.shape != Y.shape:
        raise ValueError("mask shape does not match Y")
    n_obs = int(obs.sum())
    if n_obs == 0:
        raise DegenerateWeights("no observed cells")
    if not np.isfinite(Y[obs]).all():
        raise ValueError("Y must be finite on observed cells")
    if weights is None:
        w = obs.astype(float)
    else:
        w = np.asarray(getattr(weights, "w_tilde", weights), dtype=float)
        if w.shape != Y.shape:
            raise ValueError("weight shape does not match Y")
        w = np.where(obs, w, 0.0)
        if not np.isfinite(w).all() or np.any(w[obs] <= 0):
            raise DegenerateWeights("weights must be finite and strictly positive on observed cells")
    w_max = float(w.max())
    if w_max < opts.weight_floor:
        raise DegenerateWeights(f"all weights below floor {opts.weight_floor}")
    if n_obs == Y.size:
        warnings.warn("mask has no missing cells", NoMissingCellsWarning, stacklevel=2)

    X3 = _as_3d(X, Y.shape)
    if X3 is not None and not np.isfinite(X3[obs]).all():
        raise ValueError("X must be finite on observed cells")
    n_cov = 0 if X3 is None else X3.shape[2]

    if init is not None:
        L = np.array(init.L_hat, dtype=float)
        gamma = np.array(init.gamma, dtype=float)
        delta = np.array(init.delta, dtype=float)
        beta = np.zeros((n_periods, n_cov))
        if n_cov and init.has_covariates:
            beta[:] = init._beta_2d()
        sv = np.linalg.svd(L, compute_uv=False)
    else:
        L = np.zeros(Y.shape)
        gamma = np.zeros(n_units)
        delta = np.zeros(n_periods)
        beta = np.zeros((n_periods, n_cov))
        sv = np.zeros(min(Y.shape))

    Yo = np.where(obs, Y, 0.0)
    Xo = None if X3 is None else np.where(obs[:, :, None], X3, 0.0)
    wc = np.ascontiguousarray(w)
    step = w / w_max
    threshold = lambda_L * n_obs / (2.0 * w_max)
    lam_beta_scaled = lambda_beta * n_obs / 2.0

    def xb_of(b):
        return 0.0 if Xo is None else _covariate_term(Xo, b)

    def best_effects(L_, g, d, b):
        """Minimise over (gamma, delta, beta) at fixed L, warm from g, d, b (in place)."""
        xb = xb_of(b)
        for _ in range(opts.beta_rounds if Xo is not None else 1):
            R = np.ascontiguousarray(np.where(obs, Yo - L_ - xb, 0.0))
            _backend.fe_sweeps(R, wc, g, d, opts.fe_max_sweeps, opts.fe_tol)
            if Xo is None:
                break
            b_old = b.copy()
            resid = np.where(obs, Yo - L_ - g[:, None] - d[None, :], 0.0)
            _update_beta(Xo, b, resid, w, lam_beta_scaled)
            xb = xb_of(b)
            if np.abs(b - b_old).max() <= opts.fe_tol * (1.0 + np.abs(b).max()):
                break
        shift = g.mean()
        g -= shift
        d += shift
        return xb

    def objective(L_, sv_, g, d, b, xb):
        r = Yo - L_ - xb - g[:, None] - d[None, :]
        fit_term = float((w * r * r).sum()) / n_obs
        return fit_term + lambda_L * float(sv_.sum()) + lambda_beta * float(np.abs(b).sum())

    def prox_step(Z, xb, g, d):
        target = Yo - xb - g[:, None] - d[None, :]
        return soft_threshold_svd(Z + step * (target - Z), threshold)

    xb = best_effects(L, gamma, delta, beta)
    F = objective(L, sv, gamma, delta, beta, xb)
    trace = [F]
    L_prev = L
    momentum_t = 1.0
    converged = False
    n_iter = 0
    for it in range(opts.max_iter):
        n_iter = it + 1
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum_t**2))
        coef = (momentum_t - 1.0) / t_next if opts.accelerate else 0.0
        accepted = False
        if coef > 0:
            Z = L + coef * (L - L_prev)
            g_c, d_c, b_c = gamma.copy(), delta.copy(), beta.copy()
            xb_z = best_effects(Z, g_c, d_c, b_c)
            L_c, sv_c = prox_step(Z, xb_z, g_c, d_c)
            xb_c = best_effects(L_c, g_c, d_c, b_c)
            F_c = objective(L_c, sv_c, g_c, d_c, b_c, xb_c)
            if F_c <= F:
                accepted = True
                momentum_t = t_next
        if not accepted:
            # plain majorize-minimize step from the current point never increases F
            g_c, d_c, b_c = gamma.copy(), delta.copy(), beta.copy()
            L_c, sv_c = prox_step(L, xb, g_c, d_c)
            xb_c = best_effects(L_c, g_c, d_c, b_c)
            F_c = objective(L_c, sv_c, g_c, d_c, b_c, xb_c)
            momentum_t = 1.0 if coef > 0 else t_next
            if F_c > F:
                L_c, sv_c, g_c, d_c, b_c, xb_c, F_c = L, sv, gamma, delta, beta, xb, F
        moved = (
            np.linalg.norm(L_c - L) + np.linalg.norm(g_c - gamma) + np.linalg.norm(d_c - delta)
        )
        size = np.linalg.norm(L_c) + np.linalg.norm(g_c) + np.linalg.norm(d_c)
        L_prev = L
        L, sv, gamma, delta, beta, xb = L_c, sv_c, g_c, d_c, b_c, xb_c
        F_old, F = F, F_c
        trace.append(F)
        if abs(F_old - F) <= opts.tol * max(abs(F_old), 1e-300) and moved <= opts.param_tol * max(size, 1e-12):
            converged = True
            break

    if not converged:
        msg = f"matrix completion hit {opts.max_iter} iterations without converging"
        if opts.strict:
            raise NonConvergence(msg)
        logger.info(msg)
    beta_out = beta[:, 0].copy() if n_cov == 1 else (beta.copy() if n_cov else np.zeros(n_periods))
    return McFit(
        L_hat=L,
        gamma=gamma,
        delta=delta,
        beta=beta_out,
        singular_values=sv,
        rank=_rank(sv),
        lambda_L=float(lambda_L),
        lambda_beta=float(lambda_beta),
        objective_trace=np.array(trace),
        converged=converged,
        n_iter=n_iter,
        has_covariates=n_cov > 0,
    )


# -- penalty selection ---------------------------------------------------------


@dataclass
class PenaltyConfig:
    lambda_L_grid: Optional[np.ndarray] = None
    lambda_beta_grid: Optional[np.ndarray] = None
    n_folds: int = 5
    holdout_fraction: float = 0.1
    cv_seed: int = 0
    n_lambda: int = 10
    lambda_ratio: float = 1e-4
    n_lambda_beta: int = 5


class CvResult(NamedTuple):
    lambda_L: float
    lambda_beta: float
    table: pd.DataFrame


def _fe_only_residual(Y, obs, w, X3=None):
    """Weighted residual after fitting unit and time effects alone."""
    gamma = np.zeros(Y.shape[0])
    delta = np.zeros(Y.shape[1])
    R = np.ascontiguousarray(np.where(obs, Y, 0.0))
    _backend.fe_sweeps(R, np.ascontiguousarray(w), gamma, delta, 1000, 1e-13)
    return np.where(obs, Y - gamma[:, None] - delta[None, :], 0.0)


def default_lambda_grids(Y, mask, weights=None, X=None, config: Optional[PenaltyConfig] = None):
    """Descending penalty grids anchored at the smallest all-zero solution.

    ``lambda_L`` starts at ``2 sigma_1(P_O(w * R)) / |O|`` (the level at
    which ``L = 0`` is optimal for the fixed-effects residual ``R``).
    ``lambda_beta`` is ``{0}`` without covariates, else 5 log-spaced values
    below the analogous zero-coefficient level, followed by 0.
    """
    cfg = config or PenaltyConfig()
    Y = np.asarray(Y, dtype=float)
    obs = as_observed(mask)
    w = obs.astype(float) if weights is None else np.where(obs, getattr(weights, "w_tilde", weights), 0.0)
    n_obs = int(obs.sum())
    R = _fe_only_residual(Y, obs, w)
    wr = w * R
    top = float(np.linalg.svd(wr, compute_uv=False)[0]) * 2.0 / n_obs
    if top <= 0:
        top = 1e-8
    lam_L = np.geomspace(top, top * cfg.lambda_ratio, cfg.n_lambda) if cfg.n_lambda > 1 else np.array([top])
    X3 = _as_3d(X, Y.shape)
    if X3 is None:
        lam_b = np.array([0.0])
    else:
        corr = np.abs(np.einsum("it,itp->tp", wr, np.where(obs[:, :, None], X3, 0.0)))
        top_b = 2.0 * float(corr.max()) / n_obs
        top_b = top_b if top_b > 0 else 1e-8
        lam_b = np.concatenate([np.geomspace(top_b, top_b * 1e-3, cfg.n_lambda_beta), [0.0]])
    return lam_L, lam_b


def _weighted_mse(Y, pred, w, cells):
    ww = w[cells]
    d = Y[cells] - pred[cells]
    return float((ww * d * d).sum() / ww.sum())


def fit_path(Y, mask, weights, X, lambda_L_grid, lambda_beta, options=None, init=None):
    """Warm-started fits along a descending ``lambda_L`` grid."""
    fits = []
    prev = init
    for lam in lambda_L_grid:
        prev = fit_weighted_mc(Y, mask, weights, X, lam, lambda_beta, options, init=prev)
        fits.append(prev)
    return fits


def cross_validate(Y, mask, weights=None, X=None, config: Optional[PenaltyConfig] = None, options=None) -> CvResult:
    """Choose ``(lambda_L, lambda_beta)`` by holding out observed cells.

    Each fold hides a uniform ``holdout_fraction`` of observed cells (never
    structurally missing ones), fits the rest along the warm-started
    ``lambda_L`` path and scores the weighted squared error on the hidden
    cells. Fold ``k`` draws from ``default_rng([cv_seed, k])``.
    """
    cfg = config or PenaltyConfig()
    Y = np.asarray(Y, dtype=float)
    obs = as_observed(mask)
    w_full = obs.astype(float) if weights is None else np.where(obs, getattr(weights, "w_tilde", weights), 0.0)
    if cfg.lambda_L_grid is None or cfg.lambda_beta_grid is None:
        g_L, g_b = default_lambda_grids(Y, obs, w_full, X, cfg)
    lam_L = np.asarray(cfg.lambda_L_grid if cfg.lambda_L_grid is not None else g_L, dtype=float)
    lam_b = np.asarray(cfg.lambda_beta_grid if cfg.lambda_beta_grid is not None else g_b, dtype=float)
    if X is None:
        lam_b = lam_b[:1] if lam_b.size else lam_b
    if lam_L.size == 0 or lam_b.size == 0:
        raise EmptyGrid("penalty grid is empty")
    if np.any(np.diff(lam_L) > 0):
        lam_L = np.sort(lam_L)[::-1]
    if cfg.n_folds < 1:
        raise FoldTooSmall("need at least one fold")

    obs_idx = np.flatnonzero(obs.ravel())
    n_hold = int(round(cfg.holdout_fraction * obs_idx.size))
    if n_hold < 1 or n_hold >= obs_idx.size:
        raise FoldTooSmall(f"holdout of {n_hold} cells out of {obs_idx.size} observed")

    errors = np.zeros((cfg.n_folds, lam_b.size, lam_L.size))
    for fold in range(cfg.n_folds):
        rng = np.random.default_rng([cfg.cv_seed, fold])
        hold = rng.choice(obs_idx, size=n_hold, replace=False)
        hold_mask = np.zeros(obs.size, dtype=bool)
        hold_mask[hold] = True
        hold_mask = hold_mask.reshape(obs.shape)
        train = obs & ~hold_mask
        w_train = np.where(train, w_full, 0.0)
        prev = None
        for b, lb in enumerate(lam_b):
            path = fit_path(Y, train, w_train, X, lam_L, lb, options, init=prev)
            prev = path[0]
            for k, fit in enumerate(path):
                errors[fold, b, k] = _weighted_mse(Y, fit.fitted(X), w_full, hold_mask)

    mean_err = errors.mean(axis=0)
    rows = []
    for b, lb in enumerate(lam_b):
        for k, lL in enumerate(lam_L):
            row = {"lambda_L": lL, "lambda_beta": lb, "mean_error": mean_err[b, k]}
            for fold in range(cfg.n_folds):
                row[f"fold_{fold}"] = errors[fold, b, k]
            rows.append(row)
    table = pd.DataFrame(rows)
    # first minimum in grid order prefers heavier shrinkage on ties
    b_best, k_best = np.unravel_index(int(np.argmin(mean_err)), mean_err.shape)
    return CvResult(float(lam_L[k_best]), float(lam_b[b_best]), table)


def fit_mc_cv(Y, mask, weights=None, X=None, config=None, options=None):
    """Cross-validate, then refit on all observed cells along the warm path.

    Returns ``(fit, cv_result)``.
    """
    cv = cross_validate(Y, mask, weights, X, config, options)
    grid = np.asarray(cv.table["lambda_L"].unique(), dtype=float)
    grid = grid[grid >= cv.lambda_L]
    fit = fit_path(Y, mask, weights, X, grid, cv.lambda_beta, options)[-1]
    return fit, cv


# -- prediction and trends ---------------------------------------------------


def predict_counterfactual(fit: McFit, X_hat=None, mask=None, Y=None) -> np.ndarray:
    """Model predictions on the missing cells.

    Observed cells are NaN, or carry ``Y`` unchanged when it is given.
    """
    pred = fit.fitted(X_hat)
    if mask is None:
        return pred
    obs = as_observed(mask)
    if Y is None:
        return np.where(obs, np.nan, pred)
    return np.where(obs, np.asarray(Y, dtype=float), pred)


@dataclass
class LatentTrends:
    factors: np.ndarray
    loadings: np.ndarray
    group_loading_summary: list = field(default_factory=list)


def extract_latent_trends(fit: McFit, k: int, groups=None) -> LatentTrends:
    """Top-``k`` time factors (scaled by singular value) and unit loadings.

    Signs are fixed so each factor's largest-magnitude entry is positive.
    With ``groups`` the summary reports mean absolute loading by group.
    """
    n_units, n_periods = fit.L_hat.shape
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0:
        return LatentTrends(np.zeros((0, n_periods)), np.zeros((n_units, 0)), [])
    if k > fit.rank:
        raise RankTooLow(f"requested {k} factors but the fit has rank {fit.rank}")
    U, s, Vt = np.linalg.svd(fit.L_hat, full_matrices=False)
    U, s, Vt = U[:, :k], s[:k], Vt[:k]
    flip = np.sign(Vt[np.arange(k), np.abs(Vt).argmax(axis=1)])
    flip[flip == 0] = 1.0
    Vt = Vt * flip[:, None]
    U = U * flip[None, :]
    factors = s[:, None] * Vt
    summary = []
    if groups is not None:
        labels = np.array([getattr(g, "value", g) for g in groups])
        lt = labels == Group.LATER_TREATED.value
        for j in range(k):
            a = np.abs(U[:, j])
            at_mean = float(a[~lt].mean()) if (~lt).any() else float("nan")
            lt_mean = float(a[lt].mean()) if lt.any() else float("nan")
            summary.append(
                {
                    "factor": j + 1,
                    "mean_abs_loading_AT": at_mean,
                    "mean_abs_loading_LT": lt_mean,
                    "ratio_LT_AT": lt_mean / at_mean if at_mean > 0 else float("inf"),
                }
            )
    return LatentTrends(factors, U, summary)
