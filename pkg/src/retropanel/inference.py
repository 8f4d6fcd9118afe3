"""Effect estimates, block-bootstrap intervals, placebo tests and RMSE comparisons."""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from .baselines import did_impute, scm_impute
from .errors import (
    MissingCounterfactual,
    NoMissingCellsWarning,
    PipelineFailure,
    RetroPanelError,
    UsageError,
    WindowNotAllTreated,
)
from .panel_data import PanelDataset, build_placebo_dataset, placebo_t0_from_ratio
from .pipeline import PipelineConfig, PipelineResult, run_pipeline, warm_starts

logger = logging.getLogger(__name__)

DEFAULT_N_BOOT = 999
MAX_FAILURE_SHARE = 0.10


@dataclass
class EffectEstimate:
    """Per-period and pooled effects with percentile intervals.

    ``tau_t`` and the per-period bounds are length-T vectors with NaN outside
    the estimation periods; ``tau`` is the mean of the finite ``tau_t``.
    """

    tau_t: np.ndarray
    tau: float
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    tau_ci: tuple
    p_value: Optional[float] = None
    n_boot: int = 0
    n_failed: int = 0
    seed: int = 0
    block_length: int = 0
    replicate_tau: np.ndarray = field(default=None, repr=False)

    def covers(self, value: float) -> bool:
        lo, hi = self.tau_ci
        return bool(lo <= value <= hi)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "tau_ci": list(self.tau_ci),
            "p_value": self.p_value,
            "n_boot": self.n_boot,
            "n_failed": self.n_failed,
            "seed": self.seed,
            "block_length": self.block_length,
            "tau_t": self.tau_t,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
        }


def estimate_effects(Y_hat1, ds: PanelDataset):
    """Mean gap ``Y_hat1 - Y`` over later-treated units per pre-period.

    Returns ``(tau_t, tau)``; ``tau_t`` has length T with NaN on periods
    where no unit is untreated.
    """
    Y_hat1 = np.asarray(Y_hat1, dtype=float)
    miss = ds.treatment == 0
    if Y_hat1.shape != ds.shape:
        raise MissingCounterfactual("counterfactual shape does not match the panel")
    if not miss.any():
        raise MissingCounterfactual("panel has no untreated cells")
    if not np.isfinite(Y_hat1[miss]).all():
        raise MissingCounterfactual("counterfactual undefined on some later-treated pre-period cells")
    gap = np.where(miss, Y_hat1 - ds.outcomes, 0.0)
    counts = miss.sum(axis=0)
    tau_t = np.full(ds.shape[1], np.nan)
    has = counts > 0
    tau_t[has] = gap[:, has].sum(axis=0) / counts[has]
    return tau_t, float(tau_t[has].mean())


def placebo_pvalue(tau_obs: float, tau_placebo) -> float:
    """``(1 + #{|tau_pi| > |tau_obs|}) / (n + 1)``."""
    reps = np.asarray(tau_placebo, dtype=float).ravel()
    if reps.size < 1:
        raise UsageError("need at least one placebo replicate")
    exceed = int(np.count_nonzero(np.abs(reps) > abs(tau_obs)))
    return (1 + exceed) / (reps.size + 1)


def default_block_length(n_periods: int) -> int:
    return max(1, math.ceil(n_periods ** (1.0 / 3.0) - 1e-12))


def circular_block_columns(n_periods: int, block_length: int, rng) -> np.ndarray:
    """Column indices of one circular block resample of length ``n_periods``."""
    n_blocks = -(-n_periods // block_length)
    starts = rng.integers(0, n_periods, size=n_blocks)
    cols = (starts[:, None] + np.arange(block_length)[None, :]).ravel()[:n_periods]
    return cols % n_periods


def replicate_columns(n_periods: int, block_length: int, seed: int, b: int) -> np.ndarray:
    return circular_block_columns(n_periods, block_length, np.random.default_rng([seed, b]))


class DatasetPipeline:
    """Picklable estimation closure over one panel.

    Calling it with a column resample re-runs every estimation step on the
    resampled panel, with the penalty levels selected on the original
    panel and warm starts from the original fits. ``fit()`` must run first.
    """

    def __init__(self, ds: PanelDataset, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()
        ds.require_retrospective()
        self.ds = ds
        self.result: Optional[PipelineResult] = None

    @property
    def n_periods(self) -> int:
        return self.ds.shape[1]

    def _X(self):
        return self.ds.covariates if self.config.use_covariates is not False else None

    def fit(self) -> PipelineResult:
        ds = self.ds
        self.result = run_pipeline(
            ds.outcomes, ds.treatment, self._X(), ds.t0, config=self.config
        )
        return self.result

    def __call__(self, columns):
        if self.result is None:
            raise UsageError("call fit() before resampling")
        ds = self.ds
        cols = np.asarray(columns)
        X = self._X()
        res = run_pipeline(
            ds.outcomes[:, cols],
            ds.treatment[:, cols],
            None if X is None else X[:, cols],
            ds.t0,
            cols,
            self.n_periods,
            self.config,
            self.result.penalties,
            warm_starts(self.result, cols),
        )
        return res.tau_t, res.tau


# -- block bootstrap -----------------------------------------------------------

_WORKER_PIPELINE = None


def _init_worker(pipeline):
    global _WORKER_PIPELINE
    _WORKER_PIPELINE = pipeline
    warnings.simplefilter("ignore", NoMissingCellsWarning)


def _replicate(pipeline, n_periods, block_length, seed, b):
    cols = replicate_columns(n_periods, block_length, seed, b)
    try:
        tau_cols, tau = pipeline(cols)
    except (RetroPanelError, np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.debug("replicate %d failed: %s", b, exc)
        return b, cols, None, None, f"{type(exc).__name__}: {exc}"
    return b, cols, np.asarray(tau_cols, dtype=float), float(tau), None


def _worker_replicate(args):
    return _replicate(_WORKER_PIPELINE, *args)


def resolve_workers(workers: Optional[int]) -> int:
    if workers is None or workers <= 0:
        return os.cpu_count() or 1
    return int(workers)


def run_replicates(pipeline, n_periods, n_boot, block_length, seed, workers=1):
    """Replicate outputs ordered by replicate index."""
    tasks = [(n_periods, block_length, seed, b) for b in range(n_boot)]
    workers = resolve_workers(workers)
    if workers == 1 or n_boot < 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoMissingCellsWarning)
            out = [_replicate(pipeline, *t) for t in tasks]
    else:
        chunk = max(1, n_boot // (4 * workers))
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(pipeline,)) as ex:
            out = list(ex.map(_worker_replicate, tasks, chunksize=chunk))
    out.sort(key=lambda r: r[0])
    return out


def _period_values(cols, tau_cols, n_periods):
    """Replicate per-period effects mapped back to original periods."""
    sums = np.zeros(n_periods)
    counts = np.zeros(n_periods)
    ok = np.isfinite(tau_cols)
    np.add.at(sums, cols[ok], tau_cols[ok])
    np.add.at(counts, cols[ok], 1)
    vals = np.full(n_periods, np.nan)
    vals[counts > 0] = sums[counts > 0] / counts[counts > 0]
    return vals


def _percentile_bounds(values, alpha):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float("nan"), float("nan")
    lo, hi = np.quantile(values, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def block_bootstrap_ci(
    pipeline: Callable,
    ds,
    n_boot: int = DEFAULT_N_BOOT,
    block_length: Optional[int] = None,
    seed: int = 0,
    workers: int = 1,
    alpha: float = 0.05,
    point=None,
) -> EffectEstimate:
    """Percentile intervals from circular block resamples of the columns.

    ``pipeline(columns)`` must return ``(tau_t, tau)`` for the panel whose
    columns are ``columns`` of the original (``tau_t`` indexed like
    ``columns``). ``ds`` is the panel or its number of periods. The point
    estimate is ``point`` or the pipeline on the identity resample.
    Replicate ``b`` draws from ``default_rng([seed, b])``.

    The pooled interval uses the replicate pooled effects; the per-period
    interval for period ``t`` uses the replicates that drew ``t`` (repeated
    draws averaged). The returned p-value tests a zero effect against the
    replicate effects centred at the point estimate.
    """
    n_periods = ds if isinstance(ds, (int, np.integer)) else ds.shape[1]
    if n_boot < 1:
        raise UsageError("n_boot must be at least 1")
    block_length = default_block_length(n_periods) if block_length is None else int(block_length)
    if not 1 <= block_length <= n_periods:
        raise UsageError(f"block length {block_length} outside [1, {n_periods}]")
    if point is None:
        point = pipeline(np.arange(n_periods))
    tau_t, tau = np.asarray(point[0], dtype=float), float(point[1])

    results = run_replicates(pipeline, n_periods, n_boot, block_length, seed, workers)
    failed = [r for r in results if r[2] is None]
    if len(failed) > MAX_FAILURE_SHARE * n_boot:
        raise PipelineFailure(
            f"{len(failed)} of {n_boot} bootstrap replicates failed; first: {failed[0][4]}"
        )
    if failed:
        logger.warning("%d of %d bootstrap replicates failed and were skipped", len(failed), n_boot)
    good = [r for r in results if r[2] is not None]
    rep_tau = np.array([r[3] for r in good])
    per_period = np.array([_period_values(r[1], r[2], n_periods) for r in good]).reshape(-1, n_periods)

    lower = np.full(n_periods, np.nan)
    upper = np.full(n_periods, np.nan)
    for t in np.flatnonzero(np.isfinite(tau_t)):
        lower[t], upper[t] = _percentile_bounds(per_period[:, t], alpha)
    tau_ci = _percentile_bounds(rep_tau, alpha)
    if np.isfinite(tau_ci[0]) and not tau_ci[0] <= tau <= tau_ci[1]:
        warnings.warn("point estimate lies outside its bootstrap interval", RuntimeWarning, stacklevel=2)
    p_value = placebo_pvalue(tau, rep_tau - tau) if rep_tau.size else None
    return EffectEstimate(
        tau_t=tau_t,
        tau=tau,
        ci_lower=lower,
        ci_upper=upper,
        tau_ci=tau_ci,
        p_value=p_value,
        n_boot=n_boot,
        n_failed=len(failed),
        seed=seed,
        block_length=block_length,
        replicate_tau=rep_tau,
    )


def estimate_with_ci(
    ds: PanelDataset,
    config: Optional[PipelineConfig] = None,
    n_boot: int = DEFAULT_N_BOOT,
    block_length: Optional[int] = None,
    seed: int = 0,
    workers: int = 1,
):
    """Fit the pipeline on ``ds`` and bootstrap it. Returns ``(estimate, result)``."""
    pipe = DatasetPipeline(ds, config)
    result = pipe.fit()
    est = block_bootstrap_ci(
        pipe, ds, n_boot, block_length, seed, workers, point=(result.tau_t, result.tau)
    )
    return est, result


# -- placebo tests -------------------------------------------------------------

PLACEBO_MODES = ("simultaneous", "staggered")


def placebo_config(config: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Placebo runs drop covariates; elapsed-time weights default off."""
    if config is not None:
        cfg = PipelineConfig(**{**config.__dict__, "use_covariates": False})
        return cfg
    return PipelineConfig(use_covariates=False, propensity_weights=True, elapsed_weights=False)


def run_placebo_suite(
    ds_post: PanelDataset,
    ratios: Sequence[float] = (0.5, 0.8, 0.97),
    modes: Sequence[str] = PLACEBO_MODES,
    config: Optional[PipelineConfig] = None,
    n_boot: int = DEFAULT_N_BOOT,
    seed: int = 0,
    block_length: Optional[int] = None,
    workers: int = 1,
    treated_units=None,
) -> pd.DataFrame:
    """Placebo effects and p-values on an all-treated window.

    One row per mode and ratio with the placebo start, the pooled effect,
    its interval and the p-value.
    """
    cfg = placebo_config(config)
    for mode in modes:
        if mode not in PLACEBO_MODES:
            raise UsageError(f"unknown placebo mode {mode!r}")
    rows = []
    n_periods = ds_post.shape[1]
    for mode in modes:
        for ratio in ratios:
            t0 = placebo_t0_from_ratio(ratio, n_periods)
            pds = build_placebo_dataset(ds_post, t0, mode, seed, treated_units)
            est, _ = estimate_with_ci(pds, cfg, n_boot, block_length, seed, workers)
            rows.append(
                {
                    "mode": mode,
                    "ratio": float(ratio),
                    "placebo_t0": int(t0),
                    "tau": est.tau,
                    "ci_lower": est.tau_ci[0],
                    "ci_upper": est.tau_ci[1],
                    "p_value": est.p_value,
                    "n_boot": n_boot,
                    "n_failed": est.n_failed,
                }
            )
    return pd.DataFrame(rows)


# -- estimator comparison ------------------------------------------------------

COMPARE_ESTIMATORS = ("mc", "did", "scm")


def impute_masked(Y, obs, estimator: str, config: Optional[PipelineConfig] = None) -> np.ndarray:
    """Fill unobserved cells of ``Y`` with the given estimator (no covariates)."""
    if estimator == "did":
        return did_impute(Y, obs)
    if estimator == "scm":
        cfg = config or PipelineConfig()
        return scm_impute(Y, obs, options=cfg.scm)[0]
    if estimator == "mc":
        cfg = placebo_config(config)
        return run_pipeline(Y, obs.astype(np.int8), None, config=cfg).Y_hat1
    raise UsageError(f"unknown estimator {estimator!r}")


def _comparison_run(ds_post, estimators, ratios, mode, seed, run, config):
    rng = np.random.default_rng([seed, run])
    n_units, n_periods = ds_post.shape
    treated = np.sort(rng.choice(n_units, size=n_units // 2, replace=False))
    out = []
    for ratio in ratios:
        t0 = placebo_t0_from_ratio(ratio, n_periods)
        pds = build_placebo_dataset(ds_post, t0, mode, int(rng.integers(2**31)), treated)
        obs = pds.treatment == 1
        miss = ~obs
        for est in estimators:
            try:
                filled = impute_masked(pds.outcomes, obs, est, config)
                err = filled[miss] - pds.outcomes[miss]
                rmse = float(np.sqrt(np.mean(err * err)))
            except (RetroPanelError, np.linalg.LinAlgError) as exc:
                logger.warning("run %d %s ratio %s failed: %s", run, est, ratio, exc)
                rmse = float("nan")
            out.append((run, est, float(ratio), rmse))
    return out


def _comparison_task(args):
    return _comparison_run(*args)


def rmse_runs(
    ds_post: PanelDataset,
    estimators: Sequence[str] = COMPARE_ESTIMATORS,
    ratios: Sequence[float] = (0.5, 0.8, 0.97),
    n_runs: int = 100,
    seed: int = 0,
    mode: str = "simultaneous",
    workers: int = 1,
    config: Optional[PipelineConfig] = None,
) -> pd.DataFrame:
    """Masked-cell RMSE per run, estimator and ratio.

    Run ``r`` draws ``N // 2`` placebo-treated units from
    ``default_rng([seed, r])``; every estimator sees the same mask.
    """
    if np.any(ds_post.treatment == 0):
        raise WindowNotAllTreated("comparison input must be treated in every cell")
    if ds_post.shape[0] < 4:
        raise UsageError("need at least 4 units")
    for est in estimators:
        if est not in COMPARE_ESTIMATORS:
            raise UsageError(f"unknown estimator {est!r}")
    if n_runs < 1:
        raise UsageError("n_runs must be at least 1")
    tasks = [(ds_post, tuple(estimators), tuple(ratios), mode, seed, r, config) for r in range(n_runs)]
    workers = resolve_workers(workers)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoMissingCellsWarning)
        if workers == 1:
            chunks = [_comparison_task(t) for t in tasks]
        else:
            with ProcessPoolExecutor(workers) as ex:
                chunks = list(ex.map(_comparison_task, tasks))
    rows = [row for chunk in chunks for row in chunk]
    return pd.DataFrame(rows, columns=["run", "estimator", "ratio", "rmse"])


def summarize_rmse(runs: pd.DataFrame, mode: str = "simultaneous") -> pd.DataFrame:
    """Long table: mean RMSE and its standard error per estimator and ratio.

    The standard error is NaN with a single run; ``lower``/``upper`` rows
    carry mean -/+ 1.96 standard errors.
    """
    rows = []
    for (est, ratio), g in runs.groupby(["estimator", "ratio"], sort=False):
        vals = g["rmse"].to_numpy(dtype=float)
        vals = vals[np.isfinite(vals)]
        mean = float(vals.mean()) if vals.size else float("nan")
        se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float("nan")
        rows.append(
            {
                "estimator": est,
                "ratio": ratio,
                "mode": mode,
                "metric": "rmse",
                "value": mean,
                "stderr": se,
                "n_runs": int(vals.size),
                "lower": mean - 1.96 * se,
                "upper": mean + 1.96 * se,
            }
        )
    return pd.DataFrame(rows)


def rmse_comparison(
    ds_post: PanelDataset,
    estimators: Sequence[str] = COMPARE_ESTIMATORS,
    ratios: Sequence[float] = (0.5, 0.8, 0.97),
    n_runs: int = 100,
    seed: int = 0,
    mode: str = "simultaneous",
    workers: int = 1,
    config: Optional[PipelineConfig] = None,
) -> pd.DataFrame:
    """Mean masked-cell RMSE and error bars per estimator and ratio."""
    runs = rmse_runs(ds_post, estimators, ratios, n_runs, seed, mode, workers, config)
    return summarize_rmse(runs, mode)
