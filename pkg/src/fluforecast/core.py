"""Calendar arithmetic, series identity and the shared forecast data model.

Weeks follow the MMWR convention: Sunday-to-Saturday weeks, with week 1 the
first week holding at least four days of the calendar year. Seasons start at
epidemic week 31.
"""
from __future__ import annotations

import csv
import datetime as _dt
import enum
import functools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import CalendarError, RegistryError

SEASON_START_WEEK = 31
IN_SEASON_FIRST = 10
IN_SEASON_LAST = 40
HORIZONS = (0, 1, 2, 3)

# Sunday; ordinals count whole weeks from here.
_EPOCH = _dt.date(1970, 1, 4)


class SignalKind(enum.IntEnum):
    """Surveillance signal; integer codes follow the source index s."""

    NHSN = 1
    FLUSURV = 2
    ILIPLUS = 3

    @classmethod
    def parse(cls, text: str) -> "SignalKind":
        try:
            return cls[str(text).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown signal {text!r}; expected one of "
                             f"{[k.label for k in cls]}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@functools.lru_cache(maxsize=None)
def _week1_start(year: int) -> _dt.date:
    jan4 = _dt.date(year, 1, 4)
    # Python weekday(): Monday=0 ... Sunday=6
    return jan4 - _dt.timedelta(days=(jan4.weekday() + 1) % 7)


@functools.lru_cache(maxsize=None)
def weeks_in_year(year: int) -> int:
    """Number of MMWR weeks (52 or 53) in ``year``."""
    return (_week1_start(year + 1) - _week1_start(year)).days // 7


@functools.total_ordering
@dataclass(frozen=True)
class Epiweek:
    """An MMWR epidemic week."""

    year: int
    week: int

    def __post_init__(self):
        if not isinstance(self.year, (int, np.integer)) or not isinstance(self.week, (int, np.integer)):
            raise CalendarError(f"epiweek fields must be integers, got {self.year!r}, {self.week!r}")
        if not 1 <= self.week <= weeks_in_year(int(self.year)):
            raise CalendarError(
                f"week {self.week} is invalid for MMWR year {self.year} "
                f"({weeks_in_year(int(self.year))} weeks)")

    @classmethod
    def from_int(cls, code: int) -> "Epiweek":
        """Parse a ``YYYYWW`` integer."""
        code = int(code)
        return cls(code // 100, code % 100)

    @classmethod
    def from_date(cls, day: _dt.date) -> "Epiweek":
        year = day.year + 1
        while _week1_start(year) > day:
            year -= 1
        week = (day - _week1_start(year)).days // 7 + 1
        return cls(year, week)

    @classmethod
    def from_ordinal(cls, ordinal: int) -> "Epiweek":
        return cls.from_date(_EPOCH + _dt.timedelta(weeks=int(ordinal)))

    def to_int(self) -> int:
        return self.year * 100 + self.week

    @property
    def start_date(self) -> _dt.date:
        return _week1_start(self.year) + _dt.timedelta(weeks=self.week - 1)

    @property
    def end_date(self) -> _dt.date:
        """Saturday closing the week; the hub's reference/target date."""
        return self.start_date + _dt.timedelta(days=6)

    @property
    def ordinal(self) -> int:
        return (self.start_date - _EPOCH).days // 7

    def __add__(self, weeks: int) -> "Epiweek":
        return Epiweek.from_ordinal(self.ordinal + int(weeks))

    def __sub__(self, other):
        if isinstance(other, Epiweek):
            return self.ordinal - other.ordinal
        return self + (-int(other))

    def __lt__(self, other: "Epiweek") -> bool:
        return (self.year, self.week) < (other.year, other.week)

    def __str__(self) -> str:
        return f"{self.year}-W{self.week:02d}"


@functools.lru_cache(maxsize=None)
def ordinal_of(code: int) -> int:
    """Week ordinal of a ``YYYYWW`` code (cached; used on whole columns)."""
    return Epiweek.from_int(code).ordinal


def ordinals(codes: Iterable[int]) -> np.ndarray:
    return np.array([ordinal_of(int(c)) for c in codes], dtype=np.int64)


@functools.lru_cache(maxsize=None)
def code_of_ordinal(ordinal: int) -> int:
    return Epiweek.from_ordinal(ordinal).to_int()


def season_label(start_year: int) -> str:
    return f"{start_year}/{(start_year + 1) % 100:02d}"


def season_start_year(label: str) -> int:
    return int(label.split("/")[0])


@dataclass(frozen=True)
class SeasonWeek:
    season: str
    week: int

    @property
    def in_season(self) -> bool:
        return IN_SEASON_FIRST <= self.week <= IN_SEASON_LAST


def season_week(ew: Epiweek) -> SeasonWeek:
    """Map an epiweek to its season label and 1-based week within the season.

    Weeks count continuously from epidemic week 31, so a 53-week MMWR year
    simply yields a season week 53.
    """
    if not isinstance(ew, Epiweek):
        ew = Epiweek.from_int(ew)
    start_year = ew.year if ew.week >= SEASON_START_WEEK else ew.year - 1
    week = ew.ordinal - Epiweek(start_year, SEASON_START_WEEK).ordinal + 1
    return SeasonWeek(season_label(start_year), week)


@functools.lru_cache(maxsize=None)
def christmas_week(start_year: int) -> Epiweek:
    """The week whose Saturday is the first on or after 25 December."""
    return Epiweek.from_date(_dt.date(start_year, 12, 25))


def christmas_offset(ew: Epiweek) -> int:
    """Signed weeks from the enclosing season's Christmas week to ``ew``."""
    if not isinstance(ew, Epiweek):
        ew = Epiweek.from_int(ew)
    start_year = ew.year if ew.week >= SEASON_START_WEEK else ew.year - 1
    return ew - christmas_week(start_year)


@functools.lru_cache(maxsize=None)
def _calendar_of_ordinal(ordinal: int) -> tuple[str, int, int]:
    ew = Epiweek.from_ordinal(ordinal)
    sw = season_week(ew)
    return sw.season, sw.week, christmas_offset(ew)


def calendar_columns(ords: np.ndarray) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Season labels, season weeks and Christmas offsets for week ordinals."""
    info = [_calendar_of_ordinal(int(o)) for o in ords]
    seasons = [i[0] for i in info]
    weeks = np.array([i[1] for i in info], dtype=np.int64)
    xmas = np.array([i[2] for i in info], dtype=np.int64)
    return seasons, weeks, xmas


# 23 levels: median plus endpoints of the 10%..90%, 95% and 98% central intervals.
_LEVELS = np.array(
    [0.01, 0.025]
    + [round(0.05 * k, 2) for k in range(1, 20)]
    + [0.975, 0.99])


@dataclass(frozen=True)
class QuantileLevels:
    levels: tuple

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]

    def __iter__(self):
        return iter(self.levels)

    def index(self, level: float) -> int:
        """0-based position of ``level`` (tolerant to float formatting)."""
        arr = np.asarray(self.levels)
        hit = np.flatnonzero(np.isclose(arr, level, atol=1e-9))
        if hit.size == 0:
            raise KeyError(f"level {level} not in the quantile scheme")
        return int(hit[0])

    def as_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=float)


def quantile_levels() -> QuantileLevels:
    return QuantileLevels(tuple(float(a) for a in _LEVELS))


LEVELS = quantile_levels()
MEDIAN_INDEX = LEVELS.index(0.5)


def format_level(level: float) -> str:
    """Hub spelling of a level, e.g. ``0.025`` or ``0.5``."""
    return f"{level:.3f}".rstrip("0").rstrip(".")


@dataclass(frozen=True)
class SeriesKey:
    source: SignalKind
    location: str


@dataclass(frozen=True)
class Observation:
    key: SeriesKey
    epiweek: Epiweek
    value: float


@dataclass(frozen=True)
class ForecastTask:
    source: SignalKind
    location: str
    reference_date: Epiweek
    horizon: int

    def __post_init__(self):
        if self.horizon not in HORIZONS:
            raise ValueError(f"horizon must be one of {HORIZONS}, got {self.horizon}")

    @property
    def target_week(self) -> Epiweek:
        return self.reference_date + self.horizon

    @property
    def last_data_week(self) -> Epiweek:
        return self.reference_date - 1


@dataclass(frozen=True)
class QuantileForecast:
    task: ForecastTask
    values: tuple

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (len(LEVELS),):
            raise ValueError(f"expected {len(LEVELS)} quantiles, got {vals.shape}")
        if np.any(np.diff(vals) < 0):
            raise ValueError(f"quantiles must be nondecreasing for {self.task}")
        object.__setattr__(self, "values", tuple(float(v) for v in vals))

    @classmethod
    def repaired(cls, task: ForecastTask, values, clip_zero: bool = True) -> "QuantileForecast":
        """Build from raw values, sorting to remove crossings."""
        vals = np.sort(np.asarray(values, dtype=float))
        if clip_zero:
            vals = np.maximum(vals, 0.0)
        return cls(task, tuple(vals))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values)


# ---------------------------------------------------------------- registry

SCALES = ("state", "region", "national")
LOCATION_ONEHOT_WIDTH = 65


@dataclass(frozen=True)
class LocationRegistry:
    codes: tuple
    scales: dict = field(hash=False)
    populations: dict = field(hash=False)

    def __contains__(self, code):
        return code in self.scales

    def __len__(self):
        return len(self.codes)

    def check(self, code: str) -> str:
        if code not in self.scales:
            raise RegistryError(f"unknown location code {code!r}")
        return code

    def scale(self, code: str) -> str:
        return self.scales[self.check(code)]

    def population(self, code: str) -> float:
        return self.populations[self.check(code)]

    def position(self, code: str) -> int:
        self.check(code)
        return self._positions[code]

    @functools.cached_property
    def _positions(self):
        return {c: i for i, c in enumerate(self.codes)}

    def subset(self, codes: Sequence[str]) -> "LocationRegistry":
        keep = [c for c in self.codes if c in set(codes)]
        return LocationRegistry(tuple(keep), {c: self.scales[c] for c in keep},
                                {c: self.populations[c] for c in keep})


def load_registry(path: str | Path | None = None) -> LocationRegistry:
    """Read ``location_code,scale,population`` rows; defaults to the packaged file."""
    if path is None:
        text = resources.files("fluforecast.data").joinpath("locations.csv").read_text()
        source = "packaged locations.csv"
    else:
        text = Path(path).read_text()
        source = str(path)
    reader = csv.DictReader(text.splitlines())
    missing = {"location_code", "scale", "population"} - set(reader.fieldnames or [])
    if missing:
        raise RegistryError(f"{source}: missing columns {sorted(missing)}")
    codes, scales, pops = [], {}, {}
    for lineno, row in enumerate(reader, start=2):
        code = row["location_code"].strip()
        scale = row["scale"].strip()
        if scale not in SCALES:
            raise RegistryError(f"{source}:{lineno}: scale {scale!r} not in {SCALES}")
        if code in scales:
            raise RegistryError(f"{source}:{lineno}: duplicate location {code!r}")
        try:
            pop = float(row["population"])
        except ValueError:
            raise RegistryError(f"{source}:{lineno}: bad population {row['population']!r}") from None
        if pop <= 0:
            raise RegistryError(f"{source}:{lineno}: population must be positive")
        codes.append(code)
        scales[code] = scale
        pops[code] = pop
    return LocationRegistry(tuple(codes), scales, pops)
