"""Synthetic panels with known latent structure and treatment effects."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._io import write_json
from .errors import UsageError
from .panel_data import PanelDataset, write_panel_csv


@dataclass
class CovariateSpec:
    """Covariate ``X(0) = a_i + b_t + noise`` with coefficient ``beta_t``.

    ``shift`` is added to the covariate on treated cells (``X(1)``), which
    makes it endogenous when nonzero.
    """

    beta: float = 0.5
    beta_slope: float = 0.0
    unit_scale: float = 1.0
    time_scale: float = 0.5
    noise: float = 0.1
    shift: float = 0.0


@dataclass
class DgpConfig:
    n_at: int = 30
    n_lt: int = 23
    T: int = 60
    t0: int = 24
    rank: int = 3
    factor_scale: float = 0.5
    loading_scale: float = 0.5
    fe_scale: float = 1.0
    noise_sigma: float = 0.1
    ar_coef: float = 0.0
    tau_true: float = 0.0
    effect_profile: str = "constant"
    ramp_periods: int = 8
    covariate: Optional[CovariateSpec] = None
    seed: int = 0

    def validate(self) -> None:
        if self.n_at < 0 or self.n_lt < 0 or self.n_at + self.n_lt < 1:
            raise UsageError("unit counts must be nonnegative with at least one unit")
        if self.T < 1 or not (0 < self.t0 < self.T if self.n_lt else True):
            raise UsageError("need 0 < t0 < T")
        if self.rank < 0:
            raise UsageError("rank must be nonnegative")
        if not 0 <= self.ar_coef < 1:
            raise UsageError("ar_coef must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise UsageError("noise_sigma must be nonnegative")
        if self.effect_profile not in ("constant", "ramp"):
            raise UsageError(f"unknown effect profile {self.effect_profile!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        d = dict(d)
        cov = d.pop("covariate", None)
        cfg = cls(**d)
        if cov is not None:
            cfg.covariate = CovariateSpec(**cov)
        return cfg


@dataclass
class GroundTruth:
    L: np.ndarray
    U: np.ndarray
    V: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    beta: Optional[np.ndarray]
    X0: Optional[np.ndarray]
    X1: Optional[np.ndarray]
    noise: np.ndarray
    Y0: np.ndarray
    Y1: np.ndarray
    effect: np.ndarray
    tau_t: np.ndarray
    tau: float
    config: DgpConfig = field(repr=False, default=None)

    def to_dict(self) -> dict:
        cfg = asdict(self.config) if self.config is not None else None
        return {
            "config": cfg,
            "tau": self.tau,
            "tau_t": self.tau_t,
            "gamma": self.gamma,
            "delta": self.delta,
            "beta": self.beta,
            "factors": self.V.T,
            "loadings": self.U,
            "Y1": self.Y1,
            "Y0": self.Y0,
        }


def ar1_noise(rng, n_units: int, n_periods: int, sigma: float, rho: float) -> np.ndarray:
    """Stationary AR(1) noise along time with marginal s.d. ``sigma``."""
    eps = np.empty((n_units, n_periods))
    if n_periods == 0:
        return eps
    innov = rng.standard_normal((n_units, n_periods))
    eps[:, 0] = sigma * innov[:, 0]
    step = sigma * np.sqrt(1.0 - rho * rho)
    for t in range(1, n_periods):
        eps[:, t] = rho * eps[:, t - 1] + step * innov[:, t]
    return eps


def _effect_matrix(cfg: DgpConfig, t0_units: np.ndarray) -> np.ndarray:
    """Effect of treatment on each cell under "treated throughout" for pre cells."""
    n_units = t0_units.size
    if cfg.effect_profile == "constant":
        return np.full((n_units, cfg.T), cfg.tau_true)
    t = np.arange(cfg.T)
    elapsed = np.where(t0_units[:, None] > 0, t[None, :] - t0_units[:, None], t[None, :])
    # pre cells of LT units are counterfactually treated from the start
    elapsed = np.where(elapsed < 0, t[None, :], elapsed)
    return cfg.tau_true * np.minimum(1.0, (elapsed + 1) / cfg.ramp_periods)


def generate_panel(cfg: DgpConfig):
    """Draw a panel and its ground truth.

    The first ``n_at`` units are always treated, the remaining ``n_lt``
    switch on at ``t0``. Returns ``(PanelDataset, GroundTruth)``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_units, T = cfg.n_at + cfg.n_lt, cfg.T
    U = rng.standard_normal((n_units, cfg.rank)) * cfg.loading_scale
    V = rng.standard_normal((T, cfg.rank)) * cfg.factor_scale
    L = U @ V.T
    gamma = rng.standard_normal(n_units) * cfg.fe_scale
    delta = rng.standard_normal(T) * cfg.fe_scale
    noise = ar1_noise(rng, n_units, T, cfg.noise_sigma, cfg.ar_coef)

    t0_units = np.concatenate([np.full(cfg.n_at, -1), np.full(cfg.n_lt, cfg.t0)])
    W = np.ones((n_units, T), dtype=np.int8)
    W[cfg.n_at :, : cfg.t0] = 0

    beta = X0 = X1 = None
    x_term0 = x_term1 = 0.0
    if cfg.covariate is not None:
        cs = cfg.covariate
        a = rng.standard_normal(n_units) * cs.unit_scale
        b = rng.standard_normal(T) * cs.time_scale
        X0 = a[:, None] + b[None, :] + cs.noise * rng.standard_normal((n_units, T))
        X1 = X0 + cs.shift
        beta = cs.beta + cs.beta_slope * np.arange(T) / max(T - 1, 1)
        x_term0 = X0 * beta[None, :]
        x_term1 = X1 * beta[None, :]

    base = L + gamma[:, None] + delta[None, :] + noise
    effect = _effect_matrix(cfg, t0_units)
    Y0 = base + x_term0
    Y1 = base + x_term1 + effect
    Y = np.where(W == 1, Y1, Y0)
    X = None if X0 is None else np.where(W == 1, X1, X0)

    pre = W == 0
    diff = Y1 - Y0
    cols = pre.any(axis=0)
    tau_t = np.full(T, np.nan)
    for t in np.flatnonzero(cols):
        tau_t[t] = diff[pre[:, t], t].mean()
    tau = float(np.nanmean(tau_t)) if cols.any() else float("nan")

    unit_ids = tuple(f"u{i:03d}" for i in range(n_units))
    period_ids = tuple(f"p{t:03d}" for t in range(T))
    ds = PanelDataset(Y, W, X, unit_ids, period_ids)
    truth = GroundTruth(
        L=L, U=U, V=V, gamma=gamma, delta=delta, beta=beta, X0=X0, X1=X1,
        noise=noise, Y0=Y0, Y1=Y1, effect=effect, tau_t=tau_t, tau=tau, config=cfg,
    )
    return ds, truth


def write_simulation(ds: PanelDataset, truth: GroundTruth, out_dir) -> dict:
    out_dir = Path(out_dir)
    panel = out_dir / "panel.csv"
    sidecar = out_dir / "truth.json"
    write_panel_csv(ds, panel)
    write_json(sidecar, truth.to_dict())
    return {"panel": str(panel), "truth": str(sidecar)}
