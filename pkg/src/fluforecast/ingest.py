"""Loading surveillance CSVs, reporting adjustments and training filters."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import pandas as pd

from .core import (IN_SEASON_FIRST, IN_SEASON_LAST, Epiweek, Observation, SeriesKey,
                   SignalKind, calendar_columns, ordinals, season_start_year)
from .exceptions import ConfigError, DomainError, IntegrityError, ParseError

logger = logging.getLogger(__name__)

COLUMNS = ["source", "location", "epiweek", "value", "initial_value"]
DEFAULT_EXCLUDED_SEASONS = frozenset({"2008/09", "2009/10", "2020/21", "2021/22"})


@dataclass(frozen=True)
class Dataset:
    """Immutable table of observations.

    ``frame`` has one row per (source, location, epiweek) with columns
    ``source`` (signal label), ``location``, ``epiweek`` (YYYYWW int),
    ``value`` and ``initial_value`` (first-reported value, NaN if unknown).
    """

    frame: pd.DataFrame

    def __post_init__(self):
        frame = self.frame
        if "initial_value" not in frame.columns:
            frame = frame.assign(initial_value=np.nan)
        missing = set(COLUMNS) - set(frame.columns)
        if missing:
            raise ValueError(f"dataset frame lacks columns {sorted(missing)}")
        frame = (frame[COLUMNS]
                 .astype({"source": str, "location": str, "epiweek": np.int64,
                          "value": float, "initial_value": float})
                 .sort_values(["source", "location", "epiweek"], kind="mergesort")
                 .reset_index(drop=True))
        object.__setattr__(self, "frame", frame)

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(pd.DataFrame({c: [] for c in COLUMNS}))

    @classmethod
    def concat(cls, parts) -> "Dataset":
        frames = [p.frame for p in parts if len(p)]
        if not frames:
            return cls.empty()
        ds = cls(pd.concat(frames, ignore_index=True))
        dup = ds.frame.duplicated(["source", "location", "epiweek"], keep=False)
        if dup.any():
            first = ds.frame[dup].iloc[0]
            raise IntegrityError(
                f"duplicate observation for {first.source}/{first.location} week {first.epiweek}")
        return ds

    def __len__(self):
        return len(self.frame)

    def __iter__(self) -> Iterator[Observation]:
        for row in self.frame.itertuples(index=False):
            yield Observation(SeriesKey(SignalKind.parse(row.source), row.location),
                              Epiweek.from_int(row.epiweek), row.value)

    @property
    def sources(self) -> list[str]:
        return sorted(self.frame["source"].unique())

    def keys(self) -> list[SeriesKey]:
        pairs = self.frame[["source", "location"]].drop_duplicates()
        return [SeriesKey(SignalKind.parse(s), loc) for s, loc in pairs.itertuples(index=False)]

    def select(self, mask) -> "Dataset":
        return Dataset(self.frame[np.asarray(mask, dtype=bool)])

    def of_source(self, source: SignalKind) -> "Dataset":
        return self.select(self.frame["source"].to_numpy() == source.label)

    def of_key(self, key: SeriesKey) -> "Dataset":
        f = self.frame
        return self.select((f["source"].to_numpy() == key.source.label)
                           & (f["location"].to_numpy() == key.location))

    def through(self, last: Epiweek) -> "Dataset":
        """Observations at or before ``last``; the backtest truncation."""
        return self.select(self.frame["epiweek"].to_numpy() <= last.to_int())

    def with_values(self, values) -> "Dataset":
        return Dataset(self.frame.assign(value=np.asarray(values, dtype=float)))

    def season_info(self) -> pd.DataFrame:
        """Per-row season label and season week."""
        seasons, weeks, _ = calendar_columns(ordinals(self.frame["epiweek"].to_numpy()))
        return pd.DataFrame({"season": seasons, "season_week": weeks}, index=self.frame.index)

    @property
    def revision_log(self) -> dict | None:
        """(location, epiweek int) -> (initial, final) for NHSN rows with a first report."""
        f = self.frame
        rows = f[(f["source"] == SignalKind.NHSN.label) & f["initial_value"].notna()]
        if rows.empty:
            return None
        return {(loc, int(ew)): (float(init), float(val))
                for loc, ew, init, val in zip(rows["location"], rows["epiweek"],
                                              rows["initial_value"], rows["value"])}


def load_surveillance(path: str | Path, schema: SignalKind) -> Dataset:
    """Read ``source,location,epiweek,value[,initial_value]`` rows.

    Every row's ``source`` must equal ``schema``; ILI and positivity
    component files are tagged ``iliplus``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file (no header)") from None
        required = ["source", "location", "epiweek", "value"]
        if header[:4] != required or len(header) > 5 or (len(header) == 5 and header[4] != "initial_value"):
            raise ParseError(f"{path}:1: expected header {','.join(required)}[,initial_value], got {','.join(header)}")
        has_initial = len(header) == 5
        records, seen = [], {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            source, location, ew_text, value_text = (c.strip() for c in row[:4])
            if source != schema.label:
                raise ParseError(f"{path}:{lineno}: source {source!r} does not match schema {schema.label!r}")
            try:
                ew = Epiweek.from_int(int(ew_text))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad epiweek {ew_text!r}: {exc}") from None
            value = _parse_value(value_text, path, lineno, "value")
            initial = math.nan
            if has_initial and row[4].strip():
                initial = _parse_value(row[4].strip(), path, lineno, "initial_value")
            dup_key = (location, ew.to_int())
            if dup_key in seen:
                raise IntegrityError(
                    f"{path}: rows {seen[dup_key]} and {lineno} both report {location} week {ew.to_int()}")
            seen[dup_key] = lineno
            records.append((source, location, ew.to_int(), value, initial))
    return Dataset(pd.DataFrame.from_records(records, columns=COLUMNS))


def _parse_value(text, path, lineno, name):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: {name} {text!r} is not a number") from None
    if not math.isfinite(value) or value < 0:
        raise ParseError(f"{path}:{lineno}: {name} must be finite and nonnegative, got {text}")
    return value


# ------------------------------------------------------- FluSurv-NET burden


@dataclass(frozen=True)
class BurdenRecord:
    season: str
    cum_rate: float
    us_population: float
    burden_count: float

    @property
    def burden_rate(self) -> float:
        """National burden per 100k population."""
        return self.burden_count / (self.us_population / 100_000)


def burden_scale_factor(rec: BurdenRecord) -> float:
    """Season scale-up factor so that factor * cumulative rate = burden rate."""
    if rec.cum_rate == 0:
        raise DomainError(f"{rec.season}: cumulative rate is zero")
    if min(rec.cum_rate, rec.us_population, rec.burden_count) < 0:
        raise DomainError(f"{rec.season}: burden record fields must be positive")
    return rec.burden_rate / rec.cum_rate


@dataclass(frozen=True)
class ScaleFactorTable:
    factors: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        bad = {s: a for s, a in self.factors.items() if not a > 0}
        if bad:
            raise DomainError(f"scale factors must be positive: {bad}")

    @classmethod
    def from_records(cls, records) -> "ScaleFactorTable":
        return cls({r.season: burden_scale_factor(r) for r in records})

    def __getitem__(self, season):
        return self.factors[season]

    def __contains__(self, season):
        return season in self.factors


def load_burden_table(path: str | Path | None = None) -> list[BurdenRecord]:
    """Read ``season,cum_rate,us_population,burden_count``; defaults to the packaged table."""
    if path is None:
        from importlib import resources
        text = resources.files("fluforecast.data").joinpath("burden.csv").read_text()
    else:
        text = Path(path).read_text()
    records = []
    for lineno, row in enumerate(csv.DictReader(text.splitlines()), start=2):
        try:
            records.append(BurdenRecord(row["season"].strip(), float(row["cum_rate"]),
                                        float(row["us_population"]), float(row["burden_count"])))
        except (KeyError, ValueError, AttributeError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed burden row ({exc})") from None
    return records


def apply_flusurv_adjustment(ds: Dataset, table: ScaleFactorTable) -> Dataset:
    """Multiply each FluSurv-NET value by its season's scale-up factor."""
    is_fs = ds.frame["source"].to_numpy() == SignalKind.FLUSURV.label
    if not is_fs.any():
        return ds
    seasons = np.asarray(ds.season_info()["season"])
    needed = sorted(set(seasons[is_fs]))
    missing = [s for s in needed if s not in table]
    if missing:
        raise ConfigError(f"no FluSurv-NET scale factor for seasons {missing}; "
                          f"table covers {sorted(table.factors)}")
    factor = np.ones(len(ds))
    factor[is_fs] = [table[s] for s in seasons[is_fs]]
    return ds.with_values(ds.frame["value"].to_numpy() * factor)


def compute_iliplus(ili: Dataset, positivity: Dataset) -> Dataset:
    """ILI+ = ILI percent x test positivity (a proportion), on shared weeks only."""
    pos = positivity.frame
    bad = pos[(pos["value"] < 0) | (pos["value"] > 1)]
    if len(bad):
        r = bad.iloc[0]
        raise DomainError(f"positivity must be a proportion in [0, 1]; "
                          f"{r.location} week {r.epiweek} has {r.value}")
    merged = ili.frame.merge(pos[["location", "epiweek", "value"]],
                             on=["location", "epiweek"], suffixes=("", "_pos"))
    out = pd.DataFrame({
        "source": SignalKind.ILIPLUS.label,
        "location": merged["location"],
        "epiweek": merged["epiweek"],
        "value": merged["value"] * merged["value_pos"],
    })
    return Dataset(out)


# ---------------------------------------------------------------- filters


@dataclass(frozen=True)
class TrainingFilter:
    excluded_seasons: frozenset = DEFAULT_EXCLUDED_SEASONS
    in_season_only: bool = False
    min_week: int = IN_SEASON_FIRST
    max_week: int = IN_SEASON_LAST

    def keep_mask(self, seasons, season_weeks, for_gbqr: bool) -> np.ndarray:
        seasons = np.asarray(seasons, dtype=object)
        keep = ~np.isin(seasons, list(self.excluded_seasons))
        if for_gbqr or self.in_season_only:
            season_weeks = np.asarray(season_weeks)
            keep &= (season_weeks >= self.min_week) & (season_weeks <= self.max_week)
        return keep


def filter_training(ds: Dataset, f: TrainingFilter, for_gbqr: bool) -> Dataset:
    """Drop excluded seasons, and for GBQR also the off-season weeks."""
    if len(ds) == 0:
        return ds
    info = ds.season_info()
    return ds.select(f.keep_mask(info["season"], info["season_week"], for_gbqr))


def drop_auxiliary_from(ds: Dataset, cutoff_season: str | None) -> Dataset:
    """Remove FluSurv-NET and ILI+ rows in ``cutoff_season`` and later."""
    if cutoff_season is None or len(ds) == 0:
        return ds
    cutoff = season_start_year(cutoff_season)
    start_years = np.array([season_start_year(s) for s in ds.season_info()["season"]])
    aux = ds.frame["source"].to_numpy() != SignalKind.NHSN.label
    return ds.select(~(aux & (start_years >= cutoff)))


def revision_magnitude(ds: Dataset, location: str, epiweek: Epiweek) -> float:
    """Signed revision (final minus first report) for one NHSN week."""
    log = ds.revision_log or {}
    key = (location, epiweek.to_int() if isinstance(epiweek, Epiweek) else int(epiweek))
    if key not in log:
        raise KeyError(f"no revision record for {location} week {key[1]}")
    initial, final = log[key]
    return final - initial
