"""Deterministic synthetic surveillance data for demos and end-to-end tests.

Each (season, location) pair gets one smooth epidemic curve, a Gaussian bump
in season week on top of a low baseline. All three signals are noisy views
of that curve:

* NHSN admission counts, Poisson around the hospitalization rate times
  population, with first-report values for the most recent season;
* FluSurv-NET rates, reported as the burden-adjusted rate divided by the
  season's scale-up factor, so that applying the adjustment recovers it;
* ILI percentages and test positivity proportions whose product tracks the
  curve (ILI+).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .core import SEASON_START_WEEK, Epiweek, SignalKind, load_registry, season_start_year, weeks_in_year
from .ingest import ScaleFactorTable, load_burden_table

MINI_SEASONS = ("2017/18", "2018/19", "2019/20", "2022/23", "2023/24")
MINI_LOCATIONS = ("CA", "MI", "NY", "PR", "TX", "VT")
MINI_FLUSURV_LOCATIONS = ("CA", "MI", "NY")
MINI_NHSN_SEASONS = ("2022/23", "2023/24")
MINI_REFERENCE_DATES = (202346, 202348, 202350, 202352, 202402, 202404, 202406, 202408)
# the 2023/24 scale-up factor is unknown; the generator reuses the latest one
_FALLBACK_FACTOR_SEASON = "2022/23"


@dataclass(frozen=True)
class SyntheticSpec:
    seasons: tuple = MINI_SEASONS
    locations: tuple = MINI_LOCATIONS
    flusurv_locations: tuple = MINI_FLUSURV_LOCATIONS
    nhsn_seasons: tuple = MINI_NHSN_SEASONS
    last_week: int = 202420
    seed: int = 20231202
    revision_share: float = 0.15


def season_weeks(label: str, last_code: int | None = None) -> list[Epiweek]:
    start = Epiweek(season_start_year(label), SEASON_START_WEEK)
    n = weeks_in_year(start.year)
    weeks = [start + i for i in range(n)]
    if last_code is not None:
        weeks = [w for w in weeks if w.to_int() <= last_code]
    return weeks


def epidemic_curve(n_weeks: int, peak_week: float, width: float, peak_rate: float,
                   base_rate: float) -> np.ndarray:
    """Weekly hospitalization rate per 100k by season week (1-based)."""
    t = np.arange(1, n_weeks + 1)
    return base_rate + peak_rate * np.exp(-0.5 * ((t - peak_week) / width) ** 2)


def generate(spec: SyntheticSpec = SyntheticSpec()) -> dict:
    """Frames keyed by file stem: ``nhsn``, ``flusurv``, ``ili``, ``positivity``."""
    rng = np.random.default_rng(spec.seed)
    registry = load_registry()
    factors = ScaleFactorTable.from_records(load_burden_table())
    rows = {"nhsn": [], "flusurv": [], "ili": [], "positivity": []}
    for season in spec.seasons:
        weeks = season_weeks(season, spec.last_week)
        n = len(weeks)
        # season-level severity and timing shared by all locations
        severity = rng.lognormal(0.0, 0.35)
        timing = rng.normal(18.0, 3.0)
        factor = factors[season] if season in factors else factors[_FALLBACK_FACTOR_SEASON]
        for loc in spec.locations:
            peak = timing + rng.normal(0.0, 1.5)
            width = rng.uniform(3.5, 5.5)
            curve = epidemic_curve(n, peak, width, 6.0 * severity * rng.lognormal(0, 0.2), 0.08)
            noise = rng.lognormal(0.0, 0.08, size=n)
            rate = curve * noise
            codes = [w.to_int() for w in weeks]
            if season in spec.nhsn_seasons:
                pop = registry.population(loc) / 100_000
                counts = rng.poisson(rate * pop * 0.5).astype(float)
                initial = np.full(n, np.nan)
                if season == spec.nhsn_seasons[-1]:
                    shift = rng.normal(0.0, 0.06, size=n) * counts
                    big = rng.random(n) < spec.revision_share
                    shift[big] += rng.choice([-1, 1], size=big.sum()) * rng.uniform(10, 40, size=big.sum())
                    initial = np.maximum(np.round(counts + shift), 0.0)
                for c, v, i0 in zip(codes, counts, initial):
                    rows["nhsn"].append((SignalKind.NHSN.label, loc, c, v, i0))
            if season not in spec.nhsn_seasons[-1:]:
                if loc in spec.flusurv_locations:
                    fs = np.round(rate * rng.lognormal(0, 0.05, size=n) / factor, 2)
                    for c, v in zip(codes, fs):
                        rows["flusurv"].append((SignalKind.FLUSURV.label, loc, c, v, np.nan))
                positivity = np.clip(rate / (rate + 4.0) * rng.lognormal(0, 0.05, size=n), 0.0, 1.0)
                ili = 1.0 + 0.4 * rate ** 0.8 * rng.lognormal(0, 0.05, size=n)
                for c, v, p in zip(codes, ili, positivity):
                    rows["ili"].append((SignalKind.ILIPLUS.label, loc, c, round(float(v), 4), np.nan))
                    rows["positivity"].append((SignalKind.ILIPLUS.label, loc, c, round(float(p), 4), np.nan))
    cols = ["source", "location", "epiweek", "value", "initial_value"]
    out = {}
    for stem, recs in rows.items():
        frame = pd.DataFrame.from_records(recs, columns=cols).sort_values(["location", "epiweek"])
        if frame["initial_value"].isna().all():
            frame = frame.drop(columns="initial_value")
        out[stem] = frame.reset_index(drop=True)
    return out


def write_mini(directory: str | Path, spec: SyntheticSpec = SyntheticSpec()) -> dict:
    """Write the CSV files and return their paths by stem."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for stem, frame in generate(spec).items():
        path = directory / f"{stem}.csv"
        frame.to_csv(path, index=False, float_format="%.6g", na_rep="")
        paths[stem] = path
    return paths
