"""Backtest orchestration: data assembly, per-date model fits, hub files and scoring."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import platform
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .arx import fit_arx, forecast_arx
from .baselines import flat_quantiles, trend_quantiles
from .config import ENSEMBLES, MODEL_LABELS, RunConfig
from .core import (LEVELS, Epiweek, ForecastTask, LocationRegistry, QuantileForecast, SeriesKey, SignalKind,
                   format_level, load_registry)
from .ensemble import EnsembleSpec, combine
from .exceptions import ConfigError, FluForecastError, FormatError, RegistryError
from .features import training_matrix
from .gbqr import GbqrVariant, feature_importance, fit_bagged, predict_tasks, save_ensemble
from .ingest import (Dataset, ScaleFactorTable, apply_flusurv_adjustment, compute_iliplus, drop_auxiliary_from,
                     filter_training, load_burden_table, load_surveillance)
from .score import pairwise_tournament, revision_filter, score_report, wis_matrix
from .transform import FOURTH_ROOT, fit_all, standardize_dataset

log = logging.getLogger(__name__)

HUB_COLUMNS = ["reference_date", "horizon", "target_end_date", "location", "output_type",
               "output_type_id", "value"]
GBQR_KINDS = {"gbqr": "full", "gbqr_no_level": "no_level", "gbqr_only_nhsn": "only_nhsn",
              "gbqr_by_location": "by_location", "gbqr_no_transform": "no_transform",
              "gbqr_no_reporting_adj": "no_reporting_adj"}


# ------------------------------------------------------------------ inputs

@dataclass
class Inputs:
    """Loaded surveillance components, before reporting adjustments."""

    nhsn: Dataset
    flusurv: Dataset
    ili: Dataset
    positivity: Dataset
    factors: ScaleFactorTable | None
    registry: LocationRegistry
    cutoff_season: str | None = None

    def through(self, last: Epiweek) -> "Inputs":
        return dataclasses.replace(self, nhsn=self.nhsn.through(last), flusurv=self.flusurv.through(last),
                                   ili=self.ili.through(last), positivity=self.positivity.through(last))

    def assembled(self, adjusted: bool = True, only_nhsn: bool = False) -> Dataset:
        """NHSN plus auxiliary signals; ``adjusted=False`` uses raw rates and raw ILI."""
        parts = [self.nhsn]
        if not only_nhsn:
            fs = self.flusurv
            if adjusted and len(fs):
                fs = apply_flusurv_adjustment(fs, self.factors)
            parts.append(fs)
            if len(self.ili):
                parts.append(compute_iliplus(self.ili, self.positivity) if adjusted else self.ili)
        return drop_auxiliary_from(Dataset.concat(parts), self.cutoff_season)

    def summary(self) -> pd.DataFrame:
        ds = self.assembled()
        info = ds.season_info()
        frame = ds.frame.assign(season=info["season"].to_numpy())
        return (frame.groupby(["source", "location", "season"]).size().rename("rows").reset_index())


def load_inputs(cfg: RunConfig) -> Inputs:
    d = cfg.data
    registry = load_registry(d.registry)
    nhsn = load_surveillance(d.nhsn, SignalKind.NHSN)
    flusurv = load_surveillance(d.flusurv, SignalKind.FLUSURV) if d.flusurv else Dataset.empty()
    ili = load_surveillance(d.ili, SignalKind.ILIPLUS) if d.ili else Dataset.empty()
    pos = load_surveillance(d.positivity, SignalKind.ILIPLUS) if d.positivity else Dataset.empty()
    for ds, name in ((nhsn, "nhsn"), (flusurv, "flusurv"), (ili, "ili"), (pos, "positivity")):
        for loc in sorted(ds.frame["location"].unique()):
            if loc not in registry:
                raise RegistryError(f"{name} data: unknown location code {loc!r}")
    factors = None
    if len(flusurv):
        factors = ScaleFactorTable.from_records(load_burden_table(d.burden))
    inputs = Inputs(nhsn, flusurv, ili, pos, factors, registry, d.auxiliary_cutoff_season)
    if len(flusurv):
        inputs.assembled()  # surfaces missing scale factors now
    return inputs


# ------------------------------------------------------------------ seeds

def derive_seed(master: int, *parts) -> int:
    words = [int(master)]
    for p in parts:
        words.append(zlib.crc32(p.encode()) if isinstance(p, str) else int(p))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ------------------------------------------------------------------ models

@dataclass
class Prepared:
    zt: Dataset
    params: dict


def prepare(inputs: Inputs, cfg: RunConfig, adjusted: bool = True, power: float = FOURTH_ROOT,
            only_nhsn: bool = False) -> Prepared:
    """Standardize with parameters fitted on non-excluded seasons."""
    ds = inputs.assembled(adjusted, only_nhsn)
    params = fit_all(filter_training(ds, cfg.training, for_gbqr=False), inputs.registry, power=power)
    return Prepared(standardize_dataset(ds, params), params)


def forecast_tasks(inputs: Inputs, cfg: RunConfig, reference: Epiweek) -> list:
    """NHSN tasks for locations observed at d - 1."""
    last = reference - 1
    locs = cfg.backtest.locations or sorted(inputs.nhsn.frame["location"].unique())
    observed = set(inputs.nhsn.frame.loc[inputs.nhsn.frame["epiweek"] == last.to_int(), "location"])
    tasks = []
    for loc in locs:
        if loc not in observed:
            log.warning("%s: no NHSN value at %s; no forecasts for reference date %s", loc, last, reference)
            continue
        tasks.extend(ForecastTask(SignalKind.NHSN, loc, reference, h) for h in cfg.backtest.horizons)
    return tasks


def _run_gbqr(model: str, inputs: Inputs, cfg: RunConfig, tasks, reference, prepared: dict,
              model_dir: Path | None = None) -> list:
    variant_kind = GBQR_KINDS[model]
    adjusted = variant_kind != "no_reporting_adj"
    power = 1.0 if variant_kind == "no_transform" else FOURTH_ROOT
    only_nhsn = variant_kind == "only_nhsn"
    key = (adjusted, power, only_nhsn)
    if key not in prepared:
        prepared[key] = prepare(inputs, cfg, adjusted, power, only_nhsn)
    prep = prepared[key]
    seed = derive_seed(cfg.seed, model, reference.ordinal)
    groups = ([(None, tasks)] if variant_kind != "by_location"
              else [(loc, [t for t in tasks if t.location == loc]) for loc in sorted({t.location for t in tasks})])
    out = []
    for loc, group in groups:
        variant = GbqrVariant("by_location", loc) if loc else GbqrVariant(variant_kind)
        zt = prep.zt if loc is None else prep.zt.select(prep.zt.frame["location"].to_numpy() == loc)
        rows = training_matrix(zt, inputs.registry, cfg.training, no_level=variant.no_level)
        ens = fit_bagged(rows, LEVELS, variant, cfg.gbqr, seed, cfg.num_bags, cfg.threads)
        if model_dir is not None:
            model_dir.mkdir(parents=True, exist_ok=True)
            suffix = f"-{loc}" if loc else ""
            save_ensemble(ens, model_dir / f"{reference.end_date.isoformat()}-{model}{suffix}.json.gz")
        out.extend(predict_tasks(ens, group, prep.zt, prep.params, inputs.registry))
    return out


def _run_arx(inputs: Inputs, cfg: RunConfig, tasks, reference, prepared: dict) -> list:
    key = (True, FOURTH_ROOT, False)
    if key not in prepared:
        prepared[key] = prepare(inputs, cfg)
    prep = prepared[key]
    arx_cfg = dataclasses.replace(cfg.arx, seed=derive_seed(cfg.seed, "arx", reference.ordinal))
    locs = sorted({t.location for t in tasks})
    post = fit_arx(prep.zt, arx_cfg, cfg.training, locations=locs)
    return forecast_arx(post, tasks, prep.params, seed=derive_seed(cfg.seed, "arx-sim", reference.ordinal))


def _run_baseline(model: str, inputs: Inputs, cfg: RunConfig, tasks, reference) -> list:
    fn = flat_quantiles if model == "baseline_flat" else trend_quantiles
    out = []
    horizons = sorted({t.horizon for t in tasks})
    for loc in sorted({t.location for t in tasks}):
        hist = inputs.nhsn.of_key(SeriesKey(SignalKind.NHSN, loc)).frame["value"].to_numpy()
        q = fn(hist, horizons, cfg.backtest.baseline_draws, derive_seed(cfg.seed, model, reference.ordinal, loc))
        pos = {h: i for i, h in enumerate(horizons)}
        out.extend(QuantileForecast.repaired(t, q[pos[t.horizon]]) for t in tasks if t.location == loc)
    return out


@dataclass
class DateResult:
    reference: Epiweek
    forecasts: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)


def run_reference_date(inputs: Inputs, cfg: RunConfig, reference: Epiweek, models=None,
                       model_dir: Path | None = None) -> DateResult:
    """Fit and forecast every requested model using only data through d - 1."""
    models = tuple(models or cfg.backtest.variants)
    visible = inputs.through(reference - 1)
    tasks = forecast_tasks(visible, cfg, reference)
    result = DateResult(reference)
    if not tasks:
        result.failures["*"] = "no forecast tasks"
        return result
    prepared = {}
    for model in models:
        if model in ENSEMBLES:
            continue
        try:
            if model in GBQR_KINDS:
                fc = _run_gbqr(model, visible, cfg, tasks, reference, prepared, model_dir)
            elif model == "arx":
                fc = _run_arx(visible, cfg, tasks, reference, prepared)
            else:
                fc = _run_baseline(model, visible, cfg, tasks, reference)
        except (FluForecastError, ValueError, np.linalg.LinAlgError) as exc:
            log.error("%s failed for reference date %s: %s", model, reference, exc)
            result.failures[model] = str(exc)
            continue
        result.forecasts[model] = fc
    for model in models:
        if model not in ENSEMBLES:
            continue
        members = ENSEMBLES[model]
        missing = [m for m in members if m not in result.forecasts]
        if missing:
            result.failures[model] = f"missing members {missing}"
            continue
        result.forecasts[model] = combine(EnsembleSpec(members), result.forecasts)
    return result


# ------------------------------------------------------------------ hub files

def hub_rows(forecasts) -> list:
    rows = []
    for f in sorted(forecasts, key=lambda f: (f.task.location, f.task.horizon)):
        t = f.task
        for level, v in zip(LEVELS, f.values):
            rows.append([t.reference_date.end_date.isoformat(), t.horizon, t.target_week.end_date.isoformat(),
                         t.location, "quantile", format_level(level), format(float(v), ".10g")])
    return rows


def write_hub_file(forecasts, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HUB_COLUMNS)
        w.writerows(hub_rows(forecasts))


def read_hub_file(path: str | Path) -> list:
    """Parse a hub file back into forecasts (NHSN tasks)."""
    path = Path(path)
    frame = pd.read_csv(path, dtype={"location": str, "output_type_id": str})
    if list(frame.columns) != HUB_COLUMNS:
        raise FormatError(f"{path}: expected columns {HUB_COLUMNS}, got {list(frame.columns)}")
    if set(frame["output_type"]) - {"quantile"}:
        raise FormatError(f"{path}: only quantile outputs are supported")
    expected = [format_level(a) for a in LEVELS]
    out = []
    for (ref, h, loc), g in frame.groupby(["reference_date", "horizon", "location"], sort=True):
        levels = list(g["output_type_id"])
        if sorted(levels, key=float) != sorted(expected, key=float) or len(levels) != len(expected):
            raise FormatError(f"{path}: {loc} {ref} horizon {h} does not carry the 23-level scheme")
        vals = g.set_index("output_type_id").loc[expected, "value"].to_numpy(dtype=float)
        ew = Epiweek.from_date(pd.Timestamp(ref).date())
        out.append(QuantileForecast(ForecastTask(SignalKind.NHSN, loc, ew, int(h)), tuple(vals)))
    return out


def hub_path(out_dir: Path, model: str, reference: Epiweek) -> Path:
    return Path(out_dir) / "forecasts" / model / f"{reference.end_date.isoformat()}-{model}.csv"


def read_forecast_dir(forecast_dir: str | Path) -> dict:
    """``{model: forecasts}`` from ``<dir>/<model>/*.csv``."""
    forecast_dir = Path(forecast_dir)
    out = {}
    for sub in sorted(p for p in forecast_dir.iterdir() if p.is_dir()):
        files = sorted(sub.glob("*.csv"))
        if files:
            out[sub.name] = [f for p in files for f in read_hub_file(p)]
    return out


# ------------------------------------------------------------------ scoring

def task_key(t: ForecastTask) -> tuple:
    return (t.location, t.reference_date.to_int(), t.horizon)


def truth_lookup(nhsn: Dataset) -> dict:
    f = nhsn.frame
    return {(loc, int(ew)): float(v) for loc, ew, v in zip(f["location"], f["epiweek"], f["value"])}


@dataclass
class ScoreResult:
    table: pd.DataFrame
    per_task: pd.DataFrame
    by_horizon: pd.DataFrame
    by_reference_date: pd.DataFrame
    n_filtered: int = 0


def score_forecasts(forecasts_by_model: dict, nhsn: Dataset, registry: LocationRegistry,
                    baseline: str = "baseline_flat", use_revision_filter: bool = False,
                    revision_threshold: float = 10.0, exclude_national: bool = True) -> ScoreResult:
    """Score every model against final NHSN values."""
    truth = truth_lookup(nhsn)
    rev_log = nhsn.revision_log
    records = []
    n_filtered = 0
    for model, fcs in forecasts_by_model.items():
        fcs = [f for f in fcs if not (exclude_national and registry.scale(f.task.location) == "national")]
        if use_revision_filter:
            kept = set(revision_filter([f.task for f in fcs], rev_log, revision_threshold))
            n_filtered = max(n_filtered, len(fcs) - len(kept))
            fcs = [f for f in fcs if f.task in kept]
        for f in fcs:
            z = truth.get((f.task.location, f.task.target_week.to_int()))
            if z is None:
                continue
            records.append((model, *task_key(f.task), z, f.values))
    per_task = pd.DataFrame.from_records(records, columns=["model", "location", "reference_date", "horizon",
                                                           "truth", "quantiles"])
    if per_task.empty:
        raise FluForecastError("no forecasts could be matched to observed truth")
    Q = np.array(per_task["quantiles"].tolist())
    z = per_task["truth"].to_numpy()
    per_task["wis"] = wis_matrix(Q, z)
    per_task["ae"] = np.abs(Q[:, LEVELS.index(0.5)] - z)
    per_task = per_task.drop(columns="quantiles")

    universe = per_task[["location", "reference_date", "horizon"]].drop_duplicates()
    models = list(forecasts_by_model)
    models = [m for m in models if (per_task["model"] == m).any()]
    series = {m: per_task[per_task["model"] == m].set_index(["location", "reference_date", "horizon"])
              for m in models}
    rel_wis = rel_ae = {}
    if baseline in series and len(series) >= 2:
        rel_wis = pairwise_tournament({m: s["wis"] for m, s in series.items()}, baseline)
        rel_ae = pairwise_tournament({m: s["ae"] for m, s in series.items()}, baseline)
    rows = []
    for m in models:
        idx = per_task["model"] == m
        rep = score_report(m, Q[idx.to_numpy()], z[idx.to_numpy()])
        rows.append({"Model": MODEL_LABELS.get(m, m), "model_id": m,
                     "% Submitted": 100.0 * rep.n_tasks / len(universe),
                     "MWIS": rep.mwis, "rMWIS": rel_wis.get(m), "MAE": rep.mae, "rMAE": rel_ae.get(m),
                     "50% Cov.": rep.coverage_50, "95% Cov.": rep.coverage_95})
    table = pd.DataFrame(rows).sort_values("MWIS", kind="mergesort").reset_index(drop=True)

    by_h = []
    for h, g in per_task.groupby("horizon"):
        s = {m: gg.set_index(["location", "reference_date"])["wis"] for m, gg in g.groupby("model")}
        rel = pairwise_tournament(s, baseline) if baseline in s and len(s) >= 2 else {}
        for m, v in s.items():
            by_h.append({"model": m, "horizon": int(h), "MWIS": float(v.mean()), "rMWIS": rel.get(m)})
    by_ref = (per_task.groupby(["model", "reference_date"])["wis"].mean().rename("MWIS").reset_index())
    return ScoreResult(table, per_task, pd.DataFrame(by_h), by_ref, n_filtered)


def write_scores(result: ScoreResult, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["Model", "% Submitted", "MWIS", "rMWIS", "MAE", "rMAE", "50% Cov.", "95% Cov."]
    result.table[cols + ["model_id"]].to_csv(out_dir / "score_table.csv", index=False, float_format="%.6g")
    result.per_task.to_csv(out_dir / "scores_per_task.csv", index=False, float_format="%.10g")
    result.by_horizon.to_csv(out_dir / "relative_wis_by_horizon.csv", index=False, float_format="%.6g")
    result.by_reference_date.to_csv(out_dir / "wis_by_reference_date.csv", index=False, float_format="%.6g")


def format_table(table: pd.DataFrame) -> str:
    def f(v, nd):
        return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.{nd}f}"
    lines = ["  ".join(f"{c:>22}" if i == 0 else f"{c:>11}" for i, c in enumerate(
        ["Model", "% Submitted", "MWIS", "rMWIS", "MAE", "rMAE", "50% Cov.", "95% Cov."]))]
    for _, r in table.iterrows():
        vals = [f(r["% Submitted"], 1), f(r["MWIS"], 2), f(r["rMWIS"], 3), f(r["MAE"], 2), f(r["rMAE"], 3),
                f(r["50% Cov."], 3), f(r["95% Cov."], 3)]
        lines.append("  ".join([f"{r['Model']:>22}"] + [f"{v:>11}" for v in vals]))
    return "\n".join(lines)


# ------------------------------------------------------------------ backtest

def metadata(cfg: RunConfig, extra: dict | None = None) -> dict:
    import numba
    import scipy

    meta = {
        "config_hash": cfg.config_hash(),
        "config": cfg.as_dict(),
        "seed": cfg.seed,
        "versions": {"fluforecast": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "pandas": pd.__version__, "scipy": scipy.__version__, "numba": numba.__version__},
    }
    meta.update(extra or {})
    return meta


def write_metadata(cfg: RunConfig, out_dir: Path, extra: dict | None = None) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "metadata.json").write_text(
        json.dumps(metadata(cfg, extra), indent=2, sort_keys=True, default=str) + "\n")


@dataclass
class BacktestResult:
    forecasts: dict
    failures: dict
    scores: ScoreResult | None


def run_backtest(cfg: RunConfig, inputs: Inputs | None = None) -> BacktestResult:
    inputs = inputs or load_inputs(cfg)
    out = Path(cfg.output)
    all_fc = {m: [] for m in cfg.backtest.variants}
    failures = {}
    for ref in cfg.backtest.reference_dates:
        log.info("reference date %s (%s)", ref, ref.end_date)
        res = run_reference_date(inputs, cfg, ref)
        for m, fc in res.forecasts.items():
            all_fc[m].extend(fc)
            write_hub_file(fc, hub_path(out, m, ref))
        for m, msg in res.failures.items():
            failures[f"{m}@{ref.to_int()}"] = msg
    all_fc = {m: fc for m, fc in all_fc.items() if fc}
    if not all_fc:
        write_metadata(cfg, out, {"failures": failures})
        raise FluForecastError("every model failed at every reference date")
    scores = None
    try:
        scores = score_forecasts(all_fc, inputs.nhsn, inputs.registry, cfg.score.baseline,
                                 cfg.score.revision_filter, cfg.score.revision_threshold,
                                 cfg.score.exclude_national)
        write_scores(scores, out)
    except FluForecastError as exc:
        log.warning("scoring skipped: %s", exc)
    write_metadata(cfg, out, {"failures": failures,
                              "reference_dates": [r.to_int() for r in cfg.backtest.reference_dates],
                              "models": list(all_fc)})
    return BacktestResult(all_fc, failures, scores)


def importance_table(inputs: Inputs, cfg: RunConfig, reference: Epiweek, model: str = "gbqr") -> pd.DataFrame:
    if model not in GBQR_KINDS or model == "gbqr_by_location":
        raise ConfigError(f"importance is available for pooled GBQR models, not {model!r}")
    visible = inputs.through(reference - 1)
    kind = GBQR_KINDS[model]
    prep = prepare(visible, cfg, kind != "no_reporting_adj", 1.0 if kind == "no_transform" else FOURTH_ROOT,
                   kind == "only_nhsn")
    variant = GbqrVariant(kind)
    rows = training_matrix(prep.zt, inputs.registry, cfg.training, no_level=variant.no_level)
    ens = fit_bagged(rows, LEVELS, variant, cfg.gbqr, derive_seed(cfg.seed, model, reference.ordinal),
                     cfg.num_bags, cfg.threads)
    imp = feature_importance(ens)
    return (imp.rename_axis("feature").reset_index()
            .sort_values("mean_split_count", ascending=False, kind="mergesort").reset_index(drop=True))
