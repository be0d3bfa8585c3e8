"""Season-subsampled bagging of quantile boosters, prediction and importance."""
from __future__ import annotations

import gzip
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ..core import LEVELS, ForecastTask, QuantileForecast, SeriesKey
from ..exceptions import FormatError, InsufficientDataError
from ..features import FeatureMatrix, build_feature_matrix, series_tables
from ..transform import inverse_standardize
from .booster import BinnedMatrix, BoostedQuantileModel, GbqrHyperparams, RegressionTree, bin_matrix, fit_binned
from .variants import GbqrVariant

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BAG_FRACTION = 0.7


def bag_rng(master_seed: int, bag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(bag)]))


def bag_size(n_seasons: int, fraction: float = BAG_FRACTION) -> int:
    # tolerance keeps 0.7 * 10 at 7 despite float error
    return max(1, math.ceil(fraction * n_seasons - 1e-9))


def sample_bag_seasons(seasons, master_seed: int, bag: int, fraction: float = BAG_FRACTION) -> tuple:
    pool = sorted(set(seasons))
    rng = bag_rng(master_seed, bag)
    chosen = rng.choice(len(pool), size=bag_size(len(pool), fraction), replace=False)
    return tuple(pool[i] for i in sorted(chosen))


@dataclass
class BagEnsemble:
    """``models[b][k]`` is the booster of bag ``b`` at level ``levels[k]``."""

    levels: tuple
    hp: GbqrHyperparams
    variant: GbqrVariant
    master_seed: int
    feature_names: list
    bag_seasons: list
    models: list = field(default_factory=list)

    @property
    def num_bags(self) -> int:
        return len(self.models)

    def predict_bags(self, X: np.ndarray) -> np.ndarray:
        """Per-bag predictions of shape (bags, rows, levels)."""
        X = np.asarray(X, dtype=float)
        return np.stack([np.column_stack([m.predict(X) for m in bag]) for bag in self.models])

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Median over bags (midpoint for an even bag count), shape (rows, levels)."""
        return np.median(self.predict_bags(X), axis=0)


def _fit_one_bag(binned: BinnedMatrix, y: np.ndarray, rows: np.ndarray, levels, hp) -> list:
    sub = BinnedMatrix(np.ascontiguousarray(binned.codes[rows]), binned.features, binned.thresholds,
                       binned.n_bins)
    return [fit_binned(sub, y[rows], float(a), hp) for a in levels]


def fit_bagged(rows: FeatureMatrix, levels=LEVELS, variant: GbqrVariant | None = None,
               hp: GbqrHyperparams | None = None, master_seed: int = 0, num_bags: int = 100,
               threads: int = 1, fraction: float = BAG_FRACTION) -> BagEnsemble:
    """Fit ``num_bags`` boosters per level, each on a random subset of seasons.

    ``rows.tasks`` must carry a ``season`` column. Results do not depend on
    ``threads``.
    """
    hp = hp or GbqrHyperparams()
    variant = variant or GbqrVariant()
    levels = tuple(float(a) for a in levels)
    if rows.y is None or len(rows) == 0 or not np.all(np.isfinite(rows.y)):
        raise ValueError("training rows must be nonempty with finite targets")
    seasons = rows.tasks["season"].to_numpy()
    if len(set(seasons)) < 2:
        raise InsufficientDataError(f"bagging needs at least 2 training seasons, got {sorted(set(seasons))}")
    binned = bin_matrix(rows.X, hp.max_bin)
    y = np.asarray(rows.y, dtype=float)
    bag_seasons = [sample_bag_seasons(seasons, master_seed, b, fraction) for b in range(num_bags)]
    bag_rows = [np.flatnonzero(np.isin(seasons, s)) for s in bag_seasons]

    def work(b):
        return _fit_one_bag(binned, y, bag_rows[b], levels, hp)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            models = list(pool.map(work, range(num_bags)))
    else:
        models = [work(b) for b in range(num_bags)]
    return BagEnsemble(levels, hp, variant, int(master_seed), list(rows.names), bag_seasons, models)


def predict_tasks(ens: BagEnsemble, tasks, zt, params: dict, registry) -> list:
    """Quantile forecasts on the count scale for ``tasks``.

    ``zt`` is the standardized dataset (observed through each task's d - 1)
    and ``params`` maps series keys to their transform parameters. Tasks
    without a standardized value at d - 1 are skipped with a warning.
    """
    tasks = list(tasks)
    if not tasks:
        return []
    fm = build_feature_matrix(zt, tasks, registry, ens.variant)
    if fm.names != ens.feature_names:
        raise ValueError("feature layout differs from the one the ensemble was trained on")
    tables = series_tables(zt)
    last = np.array([tables[SeriesKey(t.source, t.location)].at(np.array([t.last_data_week.ordinal]))[0]
                     if SeriesKey(t.source, t.location) in tables else np.nan for t in tasks])
    ok = np.flatnonzero(np.isfinite(last))
    for i in np.flatnonzero(~np.isfinite(last)):
        log.warning("skipping %s: no standardized value at %s", tasks[i], tasks[i].last_data_week)
    if ok.size == 0:
        return []
    yhat = ens.predict(fm.X[ok])
    out = []
    for row, i in enumerate(ok):
        t: ForecastTask = tasks[i]
        counts = inverse_standardize(yhat[row] + last[i], params[SeriesKey(t.source, t.location)])
        out.append(QuantileForecast.repaired(t, counts))
    return out


def feature_importance(ens: BagEnsemble) -> pd.Series:
    """Mean number of internal nodes splitting on each feature, over bags and levels."""
    n = len(ens.feature_names)
    total = np.zeros(n)
    count = 0
    for bag in ens.models:
        for m in bag:
            total += m.split_counts(n)
            count += 1
    return pd.Series(total / max(count, 1), index=list(ens.feature_names), name="mean_split_count")


# ------------------------------------------------------------ serialization

def ensemble_to_dict(ens: BagEnsemble) -> dict:
    hp = ens.hp
    return {
        "format": "fluforecast-gbqr",
        "format_version": FORMAT_VERSION,
        "levels": list(ens.levels),
        "hyperparams": {"num_rounds": hp.num_rounds, "learning_rate": hp.learning_rate,
                        "max_leaves": hp.max_leaves, "min_leaf_count": hp.min_leaf_count,
                        "min_split_gain": hp.min_split_gain, "max_bin": hp.max_bin},
        "variant": ens.variant.to_dict(),
        "master_seed": ens.master_seed,
        "feature_names": list(ens.feature_names),
        "bag_seasons": [list(s) for s in ens.bag_seasons],
        "bags": [[{"level": m.level, "base_score": m.base_score, "learning_rate": m.learning_rate,
                   "trees": [t.preorder() for t in m.trees]} for m in bag] for bag in ens.models],
    }


def ensemble_from_dict(d: dict) -> BagEnsemble:
    if d.get("format") != "fluforecast-gbqr" or d.get("format_version") != FORMAT_VERSION:
        raise FormatError("not a GBQR ensemble file of a supported version")
    models = [[BoostedQuantileModel(m["level"], m["base_score"], m["learning_rate"],
                                    [RegressionTree.from_preorder(t) for t in m["trees"]])
               for m in bag] for bag in d["bags"]]
    return BagEnsemble(tuple(d["levels"]), GbqrHyperparams(**d["hyperparams"]),
                       GbqrVariant.from_dict(d["variant"]), d["master_seed"], d["feature_names"],
                       [tuple(s) for s in d["bag_seasons"]], models)


def dumps_ensemble(ens: BagEnsemble) -> bytes:
    """Byte-deterministic gzip-compressed JSON."""
    raw = json.dumps(ensemble_to_dict(ens), sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0, filename="") as fh:
        fh.write(raw)
    return buf.getvalue()


def loads_ensemble(data: bytes) -> BagEnsemble:
    return ensemble_from_dict(json.loads(gzip.decompress(data)))


def save_ensemble(ens: BagEnsemble, path: str | Path) -> None:
    Path(path).write_bytes(dumps_ensemble(ens))


def load_ensemble(path: str | Path) -> BagEnsemble:
    return loads_ensemble(Path(path).read_bytes())
