"""Per-series standardization: rate conversion, power transform, scale and center.

The pipeline for a raw value ``z`` of series (location, source) is::

    u  = (z / population_100k) ** power      # population step for NHSN only
    z~ = u / scale_p95 - center_mean

with ``power = 1/4`` by default and ``power = 1`` for the no-transform
ablation. ``scale_p95`` is the 95th percentile of the step-two values
(linear interpolation between order statistics) and ``center_mean`` is the
mean of the step-two values after scaling.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LocationRegistry, SeriesKey, SignalKind
from .exceptions import DegenerateScaleError, DomainError
from .ingest import Dataset

FOURTH_ROOT = 0.25


@dataclass(frozen=True)
class TransformParams:
    key: SeriesKey
    population_100k: float
    scale_p95: float
    center_mean: float
    power: float = FOURTH_ROOT

    def __post_init__(self):
        if not self.scale_p95 > 0:
            raise DegenerateScaleError(f"{self.key}: scale must be positive, got {self.scale_p95}")

    @property
    def divisor(self) -> float:
        return self.population_100k if self.key.source == SignalKind.NHSN else 1.0


def _powered(values, population_100k, key, power):
    values = np.asarray(values, dtype=float)
    if key.source == SignalKind.NHSN:
        values = values / population_100k
    return values ** power


def fit_transform_params(ds: Dataset, key: SeriesKey, registry: LocationRegistry | None = None,
                         power: float = FOURTH_ROOT, population: float | None = None,
                         percentile_on: str = "transformed") -> TransformParams:
    """Fit scale and center for one series from its observations in ``ds``.

    ``percentile_on="raw"`` takes the 95th percentile over the raw values
    raised to ``power`` afterwards; the default takes it over the
    transformed values. The two coincide for monotone transforms up to
    interpolation, which is why the choice remains switchable.
    """
    values = ds.of_key(key).frame["value"].to_numpy()
    if values.size < 2:
        raise DegenerateScaleError(f"{key}: need at least 2 observations, got {values.size}")
    if population is None:
        population = registry.population(key.location) if registry is not None else 100_000.0
    pop_100k = population / 100_000
    stepped = _powered(values, pop_100k, key, power)
    if percentile_on == "transformed":
        scale = float(np.percentile(stepped, 95))
    elif percentile_on == "raw":
        scale = float(_powered(np.percentile(values, 95), pop_100k, key, power))
    else:
        raise ValueError(f"percentile_on must be 'transformed' or 'raw', got {percentile_on!r}")
    if not scale > 0:
        raise DegenerateScaleError(f"{key}: 95th percentile is zero; series is (nearly) all zeros")
    return TransformParams(key, pop_100k, scale, float(np.mean(stepped) / scale), power)


def standardize(z, p: TransformParams):
    """Forward transform; accepts scalars or arrays (NaN passes through)."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise DomainError(f"{p.key}: cannot standardize negative values")
    out = (z / p.divisor) ** p.power / p.scale_p95 - p.center_mean
    return float(out) if out.ndim == 0 else out


def inverse_standardize(zt, p: TransformParams):
    """Inverse transform; values below the transform's zero point map to 0."""
    u = (np.asarray(zt, dtype=float) + p.center_mean) * p.scale_p95
    u = np.maximum(u, 0.0)
    out = u ** (1.0 / p.power) * p.divisor
    return float(out) if out.ndim == 0 else out


def fit_all(ds: Dataset, registry: LocationRegistry, power: float = FOURTH_ROOT,
            percentile_on: str = "transformed") -> dict:
    """Fit params for every series in ``ds``; degenerate series are skipped."""
    params = {}
    for key in ds.keys():
        try:
            params[key] = fit_transform_params(ds, key, registry, power=power,
                                               percentile_on=percentile_on)
        except DegenerateScaleError:
            continue
    return params


def standardize_dataset(ds: Dataset, params: dict) -> Dataset:
    """Transformed copy of ``ds``; series without params are dropped."""
    parts = []
    for key, p in params.items():
        sub = ds.of_key(key)
        if len(sub):
            parts.append(sub.with_values(standardize(sub.frame["value"].to_numpy(), p)))
    return Dataset.concat(parts)


SIDECAR_COLUMNS = ["location", "source", "population_100k", "scale_p95", "center_mean", "power"]


def write_params(params: dict, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SIDECAR_COLUMNS)
        for key in sorted(params, key=lambda k: (k.location, k.source)):
            p = params[key]
            w.writerow([key.location, key.source.label, repr(p.population_100k),
                        repr(p.scale_p95), repr(p.center_mean), repr(p.power)])


def read_params(path: str | Path) -> dict:
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            key = SeriesKey(SignalKind.parse(row["source"]), row["location"])
            out[key] = TransformParams(key, float(row["population_100k"]), float(row["scale_p95"]),
                                       float(row["center_mean"]), float(row.get("power") or FOURTH_ROOT))
    return out

