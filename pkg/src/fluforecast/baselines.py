"""Reference forecasters built from simulated sums of historical weekly differences.

Baseline-flat resamples symmetrized one-week differences from the whole
history, so its median stays at the last observation. Baseline-trend averages
16 variations that use only recent differences, optionally unsymmetrized so
that a recent trend carries forward.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .core import HORIZONS, LEVELS, QuantileForecast
from .exceptions import InsufficientDataError

log = logging.getLogger(__name__)

DEFAULT_DRAWS = 10_000


@dataclass(frozen=True)
class TrendVariation:
    """One member of the trend ensemble.

    Only weekly data are available, so the temporal-resolution axis is
    represented by a window multiplier: ``long_window`` doubles the window.
    """

    window_weeks: int
    transform: str
    symmetrize: bool
    resolution_proxy: str

    @property
    def window(self) -> int:
        return self.window_weeks * (2 if self.resolution_proxy == "long_window" else 1)


TREND_VARIATIONS = tuple(
    TrendVariation(w, tr, sym, res)
    for w, res, tr, sym in itertools.product((3, 4), ("short_window", "long_window"),
                                             ("none", "sqrt"), (False, True)))
MAX_TREND_WINDOW = max(v.window for v in TREND_VARIATIONS)


def _clean(history) -> np.ndarray:
    h = np.asarray(history, dtype=float)
    h = h[np.isfinite(h)]
    if np.any(h < 0):
        raise ValueError("count histories must be nonnegative")
    return h


def simulate_paths(last: float, pool: np.ndarray, steps: int, draws: int,
                   rng: np.random.Generator, floor: float | None = 0.0) -> np.ndarray:
    """Random-walk paths of shape (draws, steps) adding uniform draws from ``pool``.

    With ``floor`` set, each path is clamped after every step.
    """
    picks = pool[rng.integers(0, pool.size, size=(draws, steps))]
    paths = np.empty((draws, steps))
    cur = np.full(draws, float(last))
    for s in range(steps):
        cur = cur + picks[:, s]
        if floor is not None:
            cur = np.maximum(cur, floor)
        paths[:, s] = cur
    return paths


def path_quantiles(paths: np.ndarray, horizons) -> np.ndarray:
    """Empirical quantiles per horizon, shape (len(horizons), 23)."""
    cols = paths[:, [h for h in horizons]]
    return np.quantile(cols, LEVELS.as_array(), axis=0, method="midpoint").T


def flat_quantiles(history, horizons=HORIZONS, draws: int = DEFAULT_DRAWS, seed=0) -> np.ndarray:
    """Baseline-flat quantiles for a history ending at the last observed week."""
    h = _clean(history)
    if h.size < 2:
        raise InsufficientDataError(f"baseline needs at least 2 observations, got {h.size}")
    d = np.diff(h)
    pool = np.concatenate([d, -d])
    rng = np.random.default_rng(seed)
    paths = simulate_paths(h[-1], pool, max(horizons) + 1, draws, rng)
    return path_quantiles(paths, horizons)


def variation_quantiles(history, v: TrendVariation, horizons=HORIZONS, draws: int = DEFAULT_DRAWS,
                        seed=0) -> np.ndarray:
    h = _clean(history)
    if h.size < v.window + 1:
        raise InsufficientDataError(f"window {v.window} needs {v.window + 1} observations, got {h.size}")
    series = np.sqrt(h) if v.transform == "sqrt" else h
    d = np.diff(series[-(v.window + 1):])
    pool = np.concatenate([d, -d]) if v.symmetrize else d
    paths = simulate_paths(series[-1], pool, max(horizons) + 1, draws, np.random.default_rng(seed))
    if v.transform == "sqrt":
        paths = paths ** 2
    return path_quantiles(paths, horizons)


def trend_quantiles(history, horizons=HORIZONS, draws: int = DEFAULT_DRAWS, seed=0,
                    variations=TREND_VARIATIONS) -> np.ndarray:
    """Baseline-trend: quantile average of the variation forecasts, clamped at 0.

    Falls back to Baseline-flat when the history is shorter than the
    longest window needs.
    """
    h = _clean(history)
    if h.size < max(v.window for v in variations) + 1:
        log.warning("history of %d weeks too short for the trend baseline; using the flat baseline", h.size)
        return flat_quantiles(h, horizons, draws, seed)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(len(variations))
    q = np.mean([variation_quantiles(h, v, horizons, draws, np.random.default_rng(s))
                 for v, s in zip(variations, seeds)], axis=0)
    return np.maximum(q, 0.0)


def _forecasts(q: np.ndarray, tasks, horizons) -> list:
    pos = {h: i for i, h in enumerate(horizons)}
    return [QuantileForecast.repaired(t, q[pos[t.horizon]]) for t in tasks]


def _check_tasks(tasks):
    tasks = list(tasks)
    refs = {(t.source, t.location, t.reference_date) for t in tasks}
    if len(refs) > 1:
        raise ValueError("baseline tasks must share one series and reference date")
    return tasks


def baseline_flat_forecast(series, tasks, draws: int = DEFAULT_DRAWS, seed=0) -> list:
    """Forecasts for ``tasks`` of one series; ``series`` holds counts through d - 1."""
    tasks = _check_tasks(tasks)
    horizons = sorted({t.horizon for t in tasks})
    return _forecasts(flat_quantiles(series, horizons, draws, seed), tasks, horizons)


def baseline_trend_forecast(series, tasks, draws: int = DEFAULT_DRAWS, seed=0) -> list:
    tasks = _check_tasks(tasks)
    horizons = sorted({t.horizon for t in tasks})
    return _forecasts(trend_quantiles(series, horizons, draws, seed), tasks, horizons)
