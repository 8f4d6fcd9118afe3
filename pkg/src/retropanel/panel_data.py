"""Panel data model, retrospective mask and CSV ingestion.

A panel holds an N x T outcome matrix, a binary treatment matrix and an
optional covariate matrix. Every unit is either always treated (AT) or later
treated (LT); an LT unit switches on at its own first treated period ``t0``
and stays treated afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateCell,
    MissingCell,
    NeverTreatedUnit,
    NoAlwaysTreated,
    NoLaterTreated,
    NonAbsorbingTreatment,
    NonBinaryTreatment,
    UsageError,
    WindowNotAllTreated,
)

DEFAULT_SCHEMA = {
    "unit": "unit",
    "period": "period",
    "outcome": "outcome",
    "treated": "treated",
    "covariate": "covariate",
}


class Group(str, Enum):
    ALWAYS_TREATED = "AT"
    LATER_TREATED = "LT"


def _infer_t0(treatment: np.ndarray, unit_ids: Sequence[str]) -> np.ndarray:
    """First treated column per unit; -1 marks always-treated units."""
    n_units, n_periods = treatment.shape
    t0 = np.empty(n_units, dtype=np.int64)
    for i in range(n_units):
        row = treatment[i]
        on = np.flatnonzero(row)
        if on.size == 0:
            raise NeverTreatedUnit(f"unit {unit_ids[i]!r} is never treated")
        first = int(on[0])
        if not np.all(row[first:] == 1):
            raise NonAbsorbingTreatment(
                f"unit {unit_ids[i]!r}: treatment switches off after period index {first}"
            )
        t0[i] = -1 if first == 0 else first
    return t0


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel of outcomes, treatment indicators and an optional covariate.

    ``groups`` and ``t0`` are derived from the treatment pattern; ``t0[i]`` is
    -1 for always-treated units.
    """

    outcomes: np.ndarray
    treatment: np.ndarray
    covariates: Optional[np.ndarray] = None
    unit_ids: tuple = ()
    period_ids: tuple = ()
    groups: tuple = field(init=False)
    t0: np.ndarray = field(init=False)

    def __post_init__(self):
        y = np.array(self.outcomes, dtype=float)
        if y.ndim != 2:
            raise UsageError("outcomes must be a 2-d array")
        n_units, n_periods = y.shape
        w_raw = np.asarray(self.treatment)
        if w_raw.shape != y.shape:
            raise UsageError("treatment must have the same shape as outcomes")
        if not np.all(np.isin(w_raw, (0, 1))):
            raise NonBinaryTreatment("treatment indicators must be 0 or 1")
        w = w_raw.astype(np.int8)
        x = None
        if self.covariates is not None:
            x = np.array(self.covariates, dtype=float)
            if x.shape != y.shape:
                raise UsageError("covariates must have the same shape as outcomes")
        unit_ids = tuple(str(u) for u in self.unit_ids) or tuple(str(i) for i in range(n_units))
        period_ids = tuple(str(p) for p in self.period_ids) or tuple(
            f"{t:04d}" for t in range(n_periods)
        )
        if len(unit_ids) != n_units or len(period_ids) != n_periods:
            raise UsageError("label counts do not match the panel shape")
        if len(set(unit_ids)) != n_units:
            raise DuplicateCell("duplicate unit labels")
        if any(a >= b for a, b in zip(period_ids, period_ids[1:])):
            raise UsageError("period labels must be strictly increasing")
        t0 = _infer_t0(w, unit_ids)
        groups = tuple(Group.ALWAYS_TREATED if s < 0 else Group.LATER_TREATED for s in t0)
        for arr in (y, w, x, t0):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treatment", w)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "unit_ids", unit_ids)
        object.__setattr__(self, "period_ids", period_ids)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "t0", t0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.outcomes.shape

    @property
    def is_lt(self) -> np.ndarray:
        return self.t0 >= 0

    @property
    def n_lt(self) -> int:
        return int(self.is_lt.sum())

    @property
    def n_at(self) -> int:
        return int((~self.is_lt).sum())

    def require_retrospective(self) -> None:
        """Check that the panel has both groups, as estimation needs."""
        if self.n_lt == 0:
            raise NoLaterTreated("no later-treated units")
        if self.n_at == 0:
            raise NoAlwaysTreated("no always-treated units")

    def select_periods(self, columns) -> "PanelDataset":
        columns = np.asarray(columns)
        return PanelDataset(
            self.outcomes[:, columns],
            self.treatment[:, columns],
            None if self.covariates is None else self.covariates[:, columns],
            self.unit_ids,
            tuple(self.period_ids[c] for c in columns),
        )

    def post_window(self) -> np.ndarray:
        """Indices of the trailing columns in which every unit is treated."""
        all_treated = np.all(self.treatment == 1, axis=0)
        start = int(self.t0.max()) if self.n_lt else 0
        cols = np.arange(start, self.shape[1])
        return cols[all_treated[cols]]

    def without_covariates(self) -> "PanelDataset":
        return PanelDataset(self.outcomes, self.treatment, None, self.unit_ids, self.period_ids)


@dataclass(frozen=True)
class ObservationMask:
    """Cells where the treated potential outcome is observed."""

    observed: np.ndarray
    count: int = field(init=False)

    def __post_init__(self):
        obs = np.array(self.observed, dtype=bool)
        obs.setflags(write=False)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "count", int(obs.sum()))

    @property
    def missing(self) -> np.ndarray:
        return ~self.observed

    @property
    def n_missing(self) -> int:
        return self.observed.size - self.count


def as_observed(mask) -> np.ndarray:
    """Boolean observed-cell array from a mask object or array."""
    if isinstance(mask, ObservationMask):
        return mask.observed
    return np.asarray(mask, dtype=bool)


def build_retrospective_mask(ds: PanelDataset) -> ObservationMask:
    return ObservationMask(ds.treatment == 1)


def placebo_t0_from_ratio(ratio: float, n_periods: int) -> int:
    """First placebo-treated column for a placebo ``T0/T`` ratio.

    Interior ratios give ``ceil(ratio * T)`` clamped to ``[2, T - 1]``. A
    ratio of 1 or more leaves no untreated cells and returns 0.
    """
    if ratio <= 0:
        raise UsageError(f"placebo ratio must be positive, got {ratio}")
    if ratio >= 1:
        return 0
    if n_periods < 3:
        raise UsageError("placebo window needs at least 3 periods")
    t0 = math.ceil(ratio * n_periods - 1e-9)
    return int(min(max(t0, 2), n_periods - 1))


def build_placebo_dataset(
    ds: PanelDataset,
    placebo_t0,
    mode: str = "simultaneous",
    seed: int = 0,
    treated_units=None,
) -> PanelDataset:
    """Overlay a fabricated treatment date on an all-treated window.

    ``treated_units`` (indices) receive the placebo adoption; by default the
    last ``N // 2`` units. The seed is only consumed in staggered mode, where
    each placebo unit draws its own start uniformly from ``[placebo_t0, T - 1]``.
    """
    if np.any(ds.treatment == 0):
        raise WindowNotAllTreated("placebo input must be treated in every cell")
    n_units, n_periods = ds.shape
    rng = np.random.default_rng(seed)
    if treated_units is None:
        treated_units = np.arange(n_units - n_units // 2, n_units)
    treated_units = np.asarray(treated_units, dtype=np.int64)
    base = np.broadcast_to(np.asarray(placebo_t0, dtype=np.int64), treated_units.shape).copy()
    if mode == "staggered":
        for k, b in enumerate(base):
            if 0 < b < n_periods - 1:
                base[k] = rng.integers(b, n_periods)
    elif mode != "simultaneous":
        raise UsageError(f"unknown placebo mode {mode!r}")
    if np.any(base < 0) or np.any(base >= n_periods):
        raise UsageError("placebo t0 must lie inside the window")
    w = np.ones((n_units, n_periods), dtype=np.int8)
    for unit, start in zip(treated_units, base):
        w[unit, :start] = 0
    return PanelDataset(ds.outcomes, w, ds.covariates, ds.unit_ids, ds.period_ids)


def load_panel_csv(path, schema: Optional[Mapping[str, str]] = None) -> PanelDataset:
    """Read a long-format panel CSV into a dense dataset."""
    names = dict(DEFAULT_SCHEMA)
    if schema:
        names.update(schema)
    df = pd.read_csv(
        path,
        dtype={names["unit"]: str, names["period"]: str},
        keep_default_na=False,
        na_values=[""],
        encoding="utf-8",
        float_precision="round_trip",
    )
    required = [names[k] for k in ("unit", "period", "outcome", "treated")]
    absent = [c for c in required if c not in df.columns]
    if absent:
        raise UsageError(f"missing columns: {', '.join(absent)}")
    has_cov = names["covariate"] in df.columns
    key = [names["unit"], names["period"]]
    dup = df.duplicated(key)
    if dup.any():
        row = df.loc[dup].iloc[0]
        raise DuplicateCell(f"duplicate cell ({row[key[0]]}, {row[key[1]]})")

    treated = pd.to_numeric(df[names["treated"]], errors="coerce")
    if treated.isna().any() or not treated.isin([0, 1]).all():
        raise NonBinaryTreatment("treatment column must contain only 0 and 1")
    df = df.assign(**{names["treated"]: treated.astype(int)})

    unit_ids = list(dict.fromkeys(df[names["unit"]]))
    period_ids = sorted(set(df[names["period"]]))
    if len(df) != len(unit_ids) * len(period_ids):
        raise MissingCell(
            f"unbalanced panel: {len(df)} rows for {len(unit_ids)} units x {len(period_ids)} periods"
        )

    def pivot(col):
        wide = df.pivot(index=names["unit"], columns=names["period"], values=col)
        return wide.reindex(index=unit_ids, columns=period_ids).to_numpy(dtype=float)

    y = pivot(names["outcome"])
    if np.isnan(y).any():
        raise MissingCell("outcome values missing")
    w = pivot(names["treated"]).astype(np.int8)
    x = pivot(names["covariate"]) if has_cov else None
    if x is not None and np.isnan(x).any():
        raise MissingCell("covariate values missing")
    return PanelDataset(y, w, x, tuple(unit_ids), tuple(period_ids))


def write_panel_csv(ds: PanelDataset, path) -> None:
    """Write the long-format CSV read by :func:`load_panel_csv`."""
    from ._io import atomic_write_text

    header = ["unit", "period", "outcome", "treated"]
    if ds.covariates is not None:
        header.append("covariate")
    lines = [",".join(header)]
    n_units, n_periods = ds.shape
    for i in range(n_units):
        for t in range(n_periods):
            row = [
                ds.unit_ids[i],
                ds.period_ids[t],
                repr(float(ds.outcomes[i, t])),
                str(int(ds.treatment[i, t])),
            ]
            if ds.covariates is not None:
                row.append(repr(float(ds.covariates[i, t])))
            lines.append(",".join(row))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")
