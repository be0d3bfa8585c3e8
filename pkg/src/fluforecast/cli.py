"""Command-line entry point: ``fluforecast {ingest,backtest,forecast,score,importance}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config, with_overrides
from .core import Epiweek
from .exceptions import FluForecastError
from .pipeline import (format_table, hub_path, importance_table, load_inputs, read_forecast_dir,
                       run_backtest, run_reference_date, score_forecasts, write_hub_file, write_metadata,
                       write_scores)

log = logging.getLogger("fluforecast")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--variants", help="comma-separated models or groups (e.g. experiment_a,baseline_trend)")
    p.add_argument("--revision-filter", action="store_true", default=None,
                   help="drop tasks whose last observed week was later revised by >= the threshold")
    p.add_argument("--threads", type=int, help="worker threads for bagged fits")
    p.add_argument("--out", help="output directory (overrides [run] output)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluforecast", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate inputs and write a normalized dataset cache")
    _common(p)

    p = sub.add_parser("backtest", help="forecast every configured reference date, then score")
    _common(p)

    p = sub.add_parser("forecast", help="forecast a single reference date")
    _common(p)
    p.add_argument("--date", type=int, required=True, help="reference epiweek as YYYYWW")
    p.add_argument("--save-models", action="store_true", help="also write serialized GBQR ensembles")

    p = sub.add_parser("score", help="score hub-format forecast files against observed data")
    _common(p)
    p.add_argument("--forecasts", help="directory with one subdirectory of hub files per model")

    p = sub.add_parser("importance", help="GBQR split-count feature importance")
    _common(p)
    p.add_argument("--date", type=int, help="reference epiweek (default: last configured)")
    p.add_argument("--model", default="gbqr")
    return parser


def _config(args):
    cfg = load_config(args.config)
    variants = args.variants.split(",") if args.variants else None
    return with_overrides(cfg, seed=args.seed, variants=variants, revision_filter=args.revision_filter,
                          threads=args.threads, output=args.out)


def cmd_ingest(cfg) -> int:
    inputs = load_inputs(cfg)
    summary = inputs.summary()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    inputs.assembled().frame.to_csv(out / "dataset.csv", index=False, float_format="%.10g")
    summary.to_csv(out / "ingest_summary.csv", index=False)
    by_source = summary.groupby("source")["rows"].sum()
    print(f"sources: {', '.join(by_source.index)}")
    for source, n in by_source.items():
        locs = summary.loc[summary["source"] == source, "location"].nunique()
        seasons = summary.loc[summary["source"] == source, "season"].nunique()
        print(f"  {source}: {n} rows, {locs} locations, {seasons} seasons")
    return 0


def cmd_backtest(cfg) -> int:
    res = run_backtest(cfg)
    if res.failures:
        for k, v in sorted(res.failures.items()):
            print(f"failed: {k}: {v}", file=sys.stderr)
    if res.scores is not None:
        print(format_table(res.scores.table))
    return 0


def cmd_forecast(cfg, date: int, save_models: bool) -> int:
    inputs = load_inputs(cfg)
    ref = Epiweek.from_int(date)
    out = Path(cfg.output)
    res = run_reference_date(inputs, cfg, ref, model_dir=out / "models" if save_models else None)
    for m, fc in res.forecasts.items():
        path = hub_path(out, m, ref)
        write_hub_file(fc, path)
        print(f"wrote {path}")
    for m, msg in res.failures.items():
        print(f"failed: {m}: {msg}", file=sys.stderr)
    write_metadata(cfg, out, {"reference_dates": [date], "failures": res.failures})
    return 0 if res.forecasts else 1


def cmd_score(cfg, forecast_dir) -> int:
    inputs = load_inputs(cfg)
    forecast_dir = Path(forecast_dir) if forecast_dir else Path(cfg.output) / "forecasts"
    fcs = read_forecast_dir(forecast_dir)
    if not fcs:
        raise FluForecastError(f"no hub files under {forecast_dir}")
    res = score_forecasts(fcs, inputs.nhsn, inputs.registry, cfg.score.baseline, cfg.score.revision_filter,
                          cfg.score.revision_threshold, cfg.score.exclude_national)
    write_scores(res, cfg.output)
    if cfg.score.revision_filter:
        print(f"revision filter removed up to {res.n_filtered} tasks per model")
    print(format_table(res.table))
    return 0


def cmd_importance(cfg, date, model) -> int:
    inputs = load_inputs(cfg)
    ref = Epiweek.from_int(date) if date else cfg.backtest.reference_dates[-1]
    table = importance_table(inputs, cfg, ref, model)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / f"importance-{model}.csv", index=False, float_format="%.6g")
    print(table.head(20).to_string(index=False))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "backtest":
            return cmd_backtest(cfg)
        if args.command == "forecast":
            return cmd_forecast(cfg, args.date, args.save_models)
        if args.command == "score":
            return cmd_score(cfg, args.forecasts)
        return cmd_importance(cfg, args.date, args.model)
    except FluForecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
