"""Windowed level/trend/curvature features and GBQR targets.

All windowed features are computed on the standardized signal from a
trailing window ending at the anchor week (the last week with data, d - 1).
Windows span contiguous calendar weeks, so a gap inside a window gives a
missing (NaN) feature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .core import (HORIZONS, LOCATION_ONEHOT_WIDTH, SCALES, ForecastTask, LocationRegistry,
                   SeriesKey, SignalKind, calendar_columns, code_of_ordinal, ordinals)
from .exceptions import RegistryError
from .ingest import Dataset, TrainingFilter

TAYLOR_D2_WINDOWS = (4, 6)
TAYLOR_D1_WINDOWS = (3, 5)
ROLLING_WINDOWS = (2, 4)
LAGS = (1, 2)


@dataclass(frozen=True)
class TaylorFit:
    degree: int
    window: int
    anchor: int
    coefficients: tuple


def rolling_mean(series, w: int, t: int) -> float:
    """Mean of ``series[t-w+1 .. t]``; NaN when the window runs off the start."""
    series = np.asarray(series, dtype=float)
    if t - w + 1 < 0 or t >= series.size:
        return math.nan
    return float(np.mean(series[t - w + 1:t + 1]))


def _taylor_design(w: int, d: int) -> np.ndarray:
    offsets = np.arange(-w + 1, 1, dtype=float)
    return np.column_stack([offsets ** c / math.factorial(c) for c in range(d + 1)])


def taylor_coeffs(series, w: int, d: int, t: int) -> TaylorFit:
    """Least-squares Taylor coefficients of degree ``d`` on the window ending at ``t``.

    ``coefficients[c]`` estimates the c-th derivative of the local trend at
    the anchor, with the model ``z[u] = sum_c beta_c (u - t)^c / c!``.
    """
    if w < d + 1:
        raise ValueError(f"window {w} too short for degree {d}")
    series = np.asarray(series, dtype=float)
    if t - w + 1 < 0 or t >= series.size:
        return TaylorFit(d, w, t, (math.nan,) * (d + 1))
    window = series[t - w + 1:t + 1]
    if np.isnan(window).any():
        return TaylorFit(d, w, t, (math.nan,) * (d + 1))
    beta, *_ = np.linalg.lstsq(_taylor_design(w, d), window, rcond=None)
    return TaylorFit(d, w, t, tuple(float(b) for b in beta))


def _windowed(values: np.ndarray, w: int, weights: np.ndarray) -> np.ndarray:
    """Apply a linear window functional at every anchor; leading anchors are NaN."""
    out = np.full((values.size, weights.shape[0]), np.nan)
    if values.size >= w:
        out[w - 1:] = sliding_window_view(values, w) @ weights.T
    return out


def base_feature_names() -> list[str]:
    names = ["signal_value"]
    for w in TAYLOR_D2_WINDOWS:
        names += [f"taylor_d2_c{c}_w{w}" for c in range(3)]
    for w in TAYLOR_D1_WINDOWS:
        names += [f"taylor_d1_c{c}_w{w}" for c in range(2)]
    names += [f"rollmean_w{w}" for w in ROLLING_WINDOWS]
    return names


def is_level_feature(name: str) -> bool:
    base = name.split("_lag")[0]
    return base == "signal_value" or base.startswith("rollmean") or "_c0_" in base


def base_features(values: np.ndarray) -> np.ndarray:
    """(T, 13) matrix of unlagged windowed features for a contiguous series."""
    values = np.asarray(values, dtype=float)
    cols = [values[:, None]]
    for w in TAYLOR_D2_WINDOWS:
        cols.append(_windowed(values, w, np.linalg.pinv(_taylor_design(w, 2))))
    for w in TAYLOR_D1_WINDOWS:
        cols.append(_windowed(values, w, np.linalg.pinv(_taylor_design(w, 1))))
    for w in ROLLING_WINDOWS:
        cols.append(_windowed(values, w, np.full((1, w), 1.0 / w)))
    return np.hstack(cols)


def feature_names(registry: LocationRegistry, no_level: bool = False) -> list[str]:
    names = [f"source_{k.label}" for k in SignalKind]
    names += [f"location_{c}" for c in registry.codes]
    names += [f"scale_{s}" for s in SCALES]
    names += ["population", "season_week", "weeks_from_christmas", "horizon"]
    base = base_feature_names()
    windowed = base + [f"{n}_lag{lag}" for lag in LAGS for n in base]
    if no_level:
        windowed = [n for n in windowed if not is_level_feature(n)]
    return names + windowed


@dataclass
class SeriesTable:
    """Contiguous standardized series for one key, NaN where weeks are missing."""

    key: SeriesKey
    start: int
    values: np.ndarray
    features: np.ndarray

    @classmethod
    def from_frame(cls, key: SeriesKey, frame: pd.DataFrame) -> "SeriesTable":
        ords = ordinals(frame["epiweek"].to_numpy())
        start = int(ords.min())
        values = np.full(int(ords.max()) - start + 1, np.nan)
        values[ords - start] = frame["value"].to_numpy()
        return cls(key, start, values, base_features(values))

    def at(self, ords: np.ndarray) -> np.ndarray:
        idx = np.asarray(ords) - self.start
        ok = (idx >= 0) & (idx < self.values.size)
        out = np.full(idx.shape, np.nan)
        out[ok] = self.values[idx[ok]]
        return out

    def features_at(self, ords: np.ndarray) -> np.ndarray:
        idx = np.asarray(ords) - self.start
        ok = (idx >= 0) & (idx < self.values.size)
        out = np.full((idx.size, self.features.shape[1]), np.nan)
        out[ok] = self.features[idx[ok]]
        return out


def series_tables(zt: Dataset) -> dict:
    tables = {}
    for (source, loc), frame in zt.frame.groupby(["source", "location"], sort=True):
        key = SeriesKey(SignalKind.parse(source), loc)
        tables[key] = SeriesTable.from_frame(key, frame)
    return tables


@dataclass
class FeatureRow:
    task: ForecastTask
    x: dict
    y: float | None


@dataclass
class FeatureMatrix:
    """Feature rows in canonical column order.

    ``tasks`` holds one row per instance with columns ``source``,
    ``location``, ``anchor`` (week ordinal of d - 1), ``horizon``,
    ``target`` (ordinal of d + h) and ``season`` (season label of the target).
    """

    names: list
    X: np.ndarray
    tasks: pd.DataFrame
    y: np.ndarray | None = None

    def __len__(self):
        return self.X.shape[0]

    def select(self, mask) -> "FeatureMatrix":
        mask = np.asarray(mask)
        return FeatureMatrix(self.names, self.X[mask], self.tasks[mask].reset_index(drop=True),
                             None if self.y is None else self.y[mask])

    def row(self, i: int) -> FeatureRow:
        t = self.tasks.iloc[i]
        task = ForecastTask(SignalKind.parse(t["source"]), t["location"],
                            _epiweek(int(t["anchor"]) + 1), int(t["horizon"]))
        return FeatureRow(task, dict(zip(self.names, self.X[i].tolist())),
                          None if self.y is None else float(self.y[i]))

    def to_csv(self, path: str | Path) -> None:
        """Debug dump: metadata columns then features; missing as empty fields."""
        meta = self.tasks.assign(reference_date=[code_of_ordinal(int(a) + 1) for a in self.tasks["anchor"]])
        out = pd.concat([meta[["source", "location", "reference_date", "horizon"]].reset_index(drop=True),
                         pd.DataFrame(self.X, columns=self.names)], axis=1)
        if self.y is not None:
            out["target"] = self.y
        out.to_csv(path, index=False, na_rep="")


def _epiweek(ordinal: int):
    from .core import Epiweek
    return Epiweek.from_ordinal(ordinal)


def _check_registry(registry: LocationRegistry) -> None:
    if len(registry) != LOCATION_ONEHOT_WIDTH:
        raise RegistryError(
            f"location registry has {len(registry)} codes; the feature layout needs exactly "
            f"{LOCATION_ONEHOT_WIDTH}")


def assemble(tables: dict, task_frame: pd.DataFrame, registry: LocationRegistry,
             no_level: bool = False) -> FeatureMatrix:
    """Build feature rows for tasks given as a frame (source, location, anchor, horizon)."""
    _check_registry(registry)
    n = len(task_frame)
    names = feature_names(registry, no_level)
    full_names = feature_names(registry, False)
    X = np.zeros((n, len(full_names)))
    anchors = task_frame["anchor"].to_numpy(dtype=np.int64)
    sources = task_frame["source"].to_numpy()
    locations = task_frame["location"].to_numpy()
    n_src, n_loc = len(SignalKind), len(registry.codes)
    scale_base = n_src + n_loc
    static = scale_base + len(SCALES)
    _, season_weeks, xmas = calendar_columns(anchors)

    for i, kind in enumerate(SignalKind):
        X[:, i] = sources == kind.label
    for loc in np.unique(locations):
        rows = locations == loc
        X[rows, n_src + registry.position(loc)] = 1.0
        X[rows, scale_base + SCALES.index(registry.scale(loc))] = 1.0
        X[rows, static] = registry.population(loc)
    X[:, static + 1] = season_weeks
    X[:, static + 2] = xmas
    X[:, static + 3] = task_frame["horizon"].to_numpy()

    n_base = len(base_feature_names())
    first = static + 4
    X[:, first:] = np.nan
    for (source, loc), idx in task_frame.groupby(["source", "location"], sort=False).indices.items():
        table = tables.get(SeriesKey(SignalKind.parse(source), loc))
        if table is None:
            continue
        a = anchors[idx]
        X[idx, first:first + n_base] = table.features_at(a)
        for j, lag in enumerate(LAGS, start=1):
            X[idx, first + j * n_base:first + (j + 1) * n_base] = table.features_at(a - lag)

    if no_level:
        keep = [full_names.index(nm) for nm in names]
        X = X[:, keep]
    frame = task_frame[["source", "location", "anchor", "horizon"]].reset_index(drop=True)
    frame = frame.assign(target=frame["anchor"] + 1 + frame["horizon"])
    return FeatureMatrix(names, X, frame)


def tasks_frame(tasks: Sequence[ForecastTask]) -> pd.DataFrame:
    return pd.DataFrame({
        "source": [t.source.label for t in tasks],
        "location": [t.location for t in tasks],
        "anchor": [t.last_data_week.ordinal for t in tasks],
        "horizon": [t.horizon for t in tasks],
    })


def build_feature_matrix(zt: Dataset, tasks: Sequence[ForecastTask], registry: LocationRegistry,
                         variant=None) -> FeatureMatrix:
    """Feature rows for explicit tasks from a standardized dataset."""
    for t in tasks:
        registry.check(t.location)
    no_level = bool(getattr(variant, "no_level", False))
    return assemble(series_tables(zt), tasks_frame(tasks), registry, no_level)


def build_targets(zt: Dataset, tasks: Sequence[ForecastTask]) -> np.ndarray:
    """Change in the standardized signal from d - 1 to d + h (NaN if unobserved)."""
    tables = series_tables(zt)
    frame = tasks_frame(tasks)
    return _targets(tables, frame)


def _targets(tables: dict, frame: pd.DataFrame) -> np.ndarray:
    y = np.full(len(frame), np.nan)
    anchors = frame["anchor"].to_numpy(dtype=np.int64)
    targets = anchors + 1 + frame["horizon"].to_numpy(dtype=np.int64)
    for (source, loc), idx in frame.groupby(["source", "location"], sort=False).indices.items():
        table = tables.get(SeriesKey(SignalKind.parse(source), loc))
        if table is not None:
            y[idx] = table.at(targets[idx]) - table.at(anchors[idx])
    return y


def training_matrix(zt: Dataset, registry: LocationRegistry, training_filter: TrainingFilter,
                    no_level: bool = False, horizons=HORIZONS) -> FeatureMatrix:
    """All (series, anchor, horizon) instances whose target passes the GBQR filter."""
    tables = series_tables(zt)
    parts = []
    for key, table in tables.items():
        present = np.flatnonzero(~np.isnan(table.values))
        for h in horizons:
            anchor_idx = present[present + 1 + h < table.values.size]
            anchor_idx = anchor_idx[~np.isnan(table.values[anchor_idx + 1 + h])]
            if anchor_idx.size:
                parts.append(pd.DataFrame({"source": key.source.label, "location": key.location,
                                           "anchor": table.start + anchor_idx, "horizon": h}))
    if not parts:
        raise ValueError("no training instances: every series is too short")
    frame = pd.concat(parts, ignore_index=True)
    targets = frame["anchor"].to_numpy() + 1 + frame["horizon"].to_numpy()
    seasons, weeks, _ = calendar_columns(targets)
    keep = training_filter.keep_mask(seasons, weeks, for_gbqr=True)
    frame = frame[keep].sort_values(["source", "location", "anchor", "horizon"], kind="mergesort")
    frame = frame.reset_index(drop=True)
    fm = assemble(tables, frame, registry, no_level)
    fm.y = _targets(tables, frame)
    fm.tasks["season"] = calendar_columns(fm.tasks["target"].to_numpy())[0]
    return fm


def prediction_matrix(zt: Dataset, registry: LocationRegistry, source: SignalKind, locations,
                      last_week_ordinal: int, no_level: bool = False, horizons=HORIZONS) -> FeatureMatrix:
    """Rows for forecasting ``locations`` from the anchor ``last_week_ordinal``."""
    frame = pd.DataFrame([(source.label, loc, last_week_ordinal, h)
                          for loc in locations for h in horizons],
                         columns=["source", "location", "anchor", "horizon"])
    return assemble(series_tables(zt), frame, registry, no_level)
