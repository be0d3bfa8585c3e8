"""Run configuration read from TOML; unknown keys are errors."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .arx import ArxConfig
from .core import HORIZONS, Epiweek
from .exceptions import ConfigError
from .gbqr import GbqrHyperparams
from .ingest import DEFAULT_EXCLUDED_SEASONS, TrainingFilter

COMPONENTS = ("gbqr", "gbqr_no_level", "arx", "baseline_flat", "baseline_trend",
              "gbqr_only_nhsn", "gbqr_by_location", "gbqr_no_transform", "gbqr_no_reporting_adj")
ENSEMBLES = {
    "gbqr__gbqr_no_level": ("gbqr", "gbqr_no_level"),
    "gbqr__arx": ("gbqr", "arx"),
    "gbqr_no_level__arx": ("gbqr_no_level", "arx"),
    "flusion": ("gbqr", "gbqr_no_level", "arx"),
}
GROUPS = {
    "experiment_a": ("gbqr", "gbqr_no_level", "arx", "gbqr__gbqr_no_level", "gbqr__arx",
                     "gbqr_no_level__arx", "flusion", "baseline_flat"),
    "experiment_b": ("gbqr", "gbqr_by_location", "gbqr_only_nhsn", "baseline_flat"),
    "experiment_c": ("gbqr", "gbqr_no_reporting_adj", "gbqr_no_transform", "baseline_flat"),
    "baselines": ("baseline_flat", "baseline_trend"),
}
MODEL_LABELS = {
    "gbqr": "GBQR", "gbqr_no_level": "GBQR-no-level", "arx": "ARX",
    "gbqr__gbqr_no_level": "GBQR, GBQR-no-level", "gbqr__arx": "GBQR, ARX",
    "gbqr_no_level__arx": "GBQR-no-level, ARX", "flusion": "Flusion",
    "baseline_flat": "Baseline-flat", "baseline_trend": "Baseline-trend",
    "gbqr_only_nhsn": "GBQR-only-NHSN", "gbqr_by_location": "GBQR-by-location",
    "gbqr_no_transform": "GBQR-no-transform", "gbqr_no_reporting_adj": "GBQR-no-reporting-adj",
}


def expand_variants(names) -> tuple:
    """Expand group names, add ensemble members, keep a canonical order."""
    wanted = set()
    for n in names:
        n = n.strip()
        if not n:
            continue
        if n in GROUPS:
            wanted.update(GROUPS[n])
        elif n in COMPONENTS or n in ENSEMBLES:
            wanted.add(n)
        else:
            raise ConfigError(f"unknown model or group {n!r}; choose from "
                              f"{sorted(set(COMPONENTS) | set(ENSEMBLES) | set(GROUPS))}")
    for e in list(wanted):
        wanted.update(ENSEMBLES.get(e, ()))
    order = list(COMPONENTS) + list(ENSEMBLES)
    return tuple(m for m in order if m in wanted)


@dataclass(frozen=True)
class DataConfig:
    nhsn: Path
    flusurv: Path | None = None
    ili: Path | None = None
    positivity: Path | None = None
    registry: Path | None = None
    burden: Path | None = None
    auxiliary_cutoff_season: str | None = None


@dataclass(frozen=True)
class BacktestConfig:
    reference_dates: tuple
    horizons: tuple = HORIZONS
    variants: tuple = GROUPS["experiment_a"]
    locations: tuple | None = None
    baseline_draws: int = 10_000


@dataclass(frozen=True)
class ScoreConfig:
    baseline: str = "baseline_flat"
    revision_filter: bool = False
    revision_threshold: float = 10.0
    exclude_national: bool = True


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    backtest: BacktestConfig
    training: TrainingFilter = field(default_factory=TrainingFilter)
    gbqr: GbqrHyperparams = field(default_factory=GbqrHyperparams)
    num_bags: int = 100
    arx: ArxConfig = field(default_factory=ArxConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    seed: int = 42
    threads: int = 1
    output: Path = Path("out")
    source_text: str = ""

    def config_hash(self) -> str:
        """Digest of every setting that can change results; output location and threads are left out."""
        d = self.as_dict()
        d.pop("output")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("source_text")
        d["training"]["excluded_seasons"] = sorted(self.training.excluded_seasons)
        return d


_SECTIONS = {
    "data": {"nhsn", "flusurv", "ili", "positivity", "registry", "burden", "auxiliary_cutoff_season"},
    "training": {"excluded_seasons", "in_season_min_week", "in_season_max_week"},
    "gbqr": {"num_rounds", "learning_rate", "max_leaves", "min_leaf_count", "min_split_gain", "max_bin",
             "num_bags"},
    "arx": {"order", "num_chains", "warmup_draws", "posterior_draws", "halfcauchy_scale", "scale_floor",
            "known_future_covariate", "check_convergence"},
    "backtest": {"reference_dates", "horizons", "variants", "locations", "baseline_draws"},
    "score": {"baseline", "revision_filter", "revision_threshold", "exclude_national"},
    "run": {"seed", "threads", "output"},
}


def _check_keys(raw: dict) -> None:
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        extra = set(body) - _SECTIONS[section]
        if extra:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(extra)}")


def _path(base: Path, value, required=False, name=""):
    if value in (None, ""):
        if required:
            raise ConfigError(f"[data] {name} is required")
        return None
    p = Path(value)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ConfigError(f"[data] {name}: file not found: {p}")
    return p


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    base = Path(base_dir)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    _check_keys(raw)
    d = raw.get("data", {})
    data = DataConfig(**{k: _path(base, d.get(k), k == "nhsn", k)
                         for k in ("nhsn", "flusurv", "ili", "positivity", "registry", "burden")},
                      auxiliary_cutoff_season=d.get("auxiliary_cutoff_season"))
    if (data.ili is None) != (data.positivity is None):
        raise ConfigError("[data] ili and positivity must be given together")

    t = raw.get("training", {})
    training = TrainingFilter(
        excluded_seasons=frozenset(t.get("excluded_seasons", sorted(DEFAULT_EXCLUDED_SEASONS))),
        min_week=t.get("in_season_min_week", 10), max_week=t.get("in_season_max_week", 40))

    g = dict(raw.get("gbqr", {}))
    num_bags = int(g.pop("num_bags", 100))
    r = raw.get("run", {})
    a = dict(raw.get("arx", {}))
    try:
        gbqr = GbqrHyperparams(**g)
        arx = ArxConfig(seed=int(r.get("seed", 42)), **a)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if num_bags < 1:
        raise ConfigError("[gbqr] num_bags must be positive")

    b = raw.get("backtest", {})
    if "reference_dates" not in b:
        raise ConfigError("[backtest] reference_dates is required")
    try:
        dates = tuple(Epiweek.from_int(int(x)) for x in b["reference_dates"])
    except ValueError as exc:
        raise ConfigError(f"[backtest] bad reference date: {exc}") from None
    locs = b.get("locations")
    backtest = BacktestConfig(
        reference_dates=dates,
        horizons=tuple(int(h) for h in b.get("horizons", HORIZONS)),
        variants=expand_variants(b.get("variants", ["experiment_a"])),
        locations=tuple(locs) if locs else None,
        baseline_draws=int(b.get("baseline_draws", 10_000)))
    if not set(backtest.horizons) <= set(HORIZONS):
        raise ConfigError(f"[backtest] horizons must be within {HORIZONS}")

    score = ScoreConfig(**raw.get("score", {}))
    return RunConfig(data, backtest, training, gbqr, num_bags, arx, score,
                     seed=int(r.get("seed", 42)), threads=int(r.get("threads", 1)),
                     output=(base / r.get("output", "out")), source_text=text)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)


def with_overrides(cfg: RunConfig, seed=None, variants=None, revision_filter=None, threads=None,
                   output=None) -> RunConfig:
    """Apply command-line overrides."""
    changes = {}
    if seed is not None:
        changes["seed"] = int(seed)
        changes["arx"] = dataclasses.replace(cfg.arx, seed=int(seed))
    if variants is not None:
        changes["backtest"] = dataclasses.replace(cfg.backtest, variants=expand_variants(variants))
    if revision_filter is not None:
        changes["score"] = dataclasses.replace(cfg.score, revision_filter=bool(revision_filter))
    if threads is not None:
        changes["threads"] = int(threads)
    if output is not None:
        changes["output"] = Path(output)
    return dataclasses.replace(cfg, **changes)
