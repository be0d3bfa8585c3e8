"""Forecast evaluation: pinball loss, WIS, MAE, coverage and relative skill.

Relative skill uses a pairwise tournament. For models m and m' scored on
their shared tasks I(m, m'), the ratio MWIS_m / MWIS_m' is formed; the
geometric mean of these ratios over all opponents gives theta_m, and the
relative score is theta_m / theta_baseline.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import LEVELS, MEDIAN_INDEX, QuantileForecast
from .exceptions import UndefinedScoreError

log = logging.getLogger(__name__)

SCORE_FLOOR = 1e-12
TABLE_COLUMNS = ["Model", "% Submitted", "MWIS", "rMWIS", "MAE", "rMAE", "50% Cov.", "95% Cov."]


def quantile_score(q, z, alpha):
    """Pinball loss ``alpha*max(z-q,0) + (1-alpha)*max(q-z,0)``; broadcasts."""
    q = np.asarray(q, dtype=float)
    z = np.asarray(z, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any((alpha <= 0) | (alpha >= 1)):
        raise ValueError("quantile levels must lie in (0, 1)")
    out = alpha * np.maximum(z - q, 0.0) + (1.0 - alpha) * np.maximum(q - z, 0.0)
    return float(out) if out.ndim == 0 else out


def wis(q, z, levels=None) -> float:
    """Mean over levels of twice the pinball loss.

    ``q`` may be a :class:`QuantileForecast` or an array matching ``levels``
    (the 23-level scheme by default). Quantile crossings are rejected.
    """
    if isinstance(q, QuantileForecast):
        q = q.as_array()
    q = np.asarray(q, dtype=float)
    levels = LEVELS.as_array() if levels is None else np.asarray(levels, dtype=float)
    if q.shape != levels.shape:
        raise ValueError(f"expected {levels.size} quantiles, got {q.shape}")
    if np.any(np.diff(q) < 0):
        raise ValueError("forecast quantiles cross; repair them before scoring")
    return float(np.mean(2.0 * quantile_score(q, z, levels)))


def wis_matrix(Q: np.ndarray, z: np.ndarray, levels=None) -> np.ndarray:
    """Row-wise WIS for a (tasks, levels) matrix."""
    levels = LEVELS.as_array() if levels is None else np.asarray(levels, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if np.any(np.diff(Q, axis=1) < 0):
        raise ValueError("forecast quantiles cross; repair them before scoring")
    return np.mean(2.0 * quantile_score(Q, np.asarray(z, dtype=float)[:, None], levels[None, :]), axis=1)


def _nonempty(Q, z):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        raise UndefinedScoreError("cannot score an empty task set")
    return Q, z


def mae(Q, z) -> float:
    Q, z = _nonempty(Q, z)
    return float(np.mean(np.abs(Q[:, MEDIAN_INDEX] - z)))


def interval_coverage(Q, z, nominal: float) -> float:
    """Fraction of truths inside the central interval with the given nominal coverage."""
    Q, z = _nonempty(Q, z)
    lo = LEVELS.index(round((1 - nominal) / 2, 6))
    hi = LEVELS.index(round(1 - (1 - nominal) / 2, 6))
    return float(np.mean((Q[:, lo] <= z) & (z <= Q[:, hi])))


def quantile_coverage_differential(Q, z) -> np.ndarray:
    """``mean(1{z <= q_k}) - alpha_k`` for every level."""
    Q, z = _nonempty(Q, z)
    return np.mean(z[:, None] <= Q, axis=0) - LEVELS.as_array()


@dataclass
class ScoreReport:
    model: str
    n_tasks: int
    mwis: float
    mae: float
    coverage_50: float
    coverage_95: float
    delta: np.ndarray
    rmwis: float | None = None
    rmae: float | None = None
    pct_submitted: float | None = None


def score_report(model: str, Q, z) -> ScoreReport:
    Q, z = _nonempty(Q, z)
    return ScoreReport(model, len(z), float(np.mean(wis_matrix(Q, z))), mae(Q, z),
                       interval_coverage(Q, z, 0.5), interval_coverage(Q, z, 0.95),
                       quantile_coverage_differential(Q, z))


def pairwise_tournament(scores: dict, baseline: str) -> dict:
    """Relative scores by geometric-mean pairwise ratios over shared tasks.

    ``scores`` maps model id to a Series of per-task scores indexed by a
    hashable task key. Pairs with no shared tasks are excluded with a
    warning; a model with no opponents at all is left unscored (``None``).
    """
    if len(scores) < 2:
        raise ValueError("a tournament needs at least 2 models")
    if baseline not in scores:
        raise ValueError(f"baseline {baseline!r} is not among the scored models")
    models = list(scores)
    theta = {}
    for m in models:
        logs = []
        for other in models:
            if other == m:
                continue
            shared = scores[m].index.intersection(scores[other].index)
            if len(shared) == 0:
                log.warning("models %s and %s share no tasks; pair excluded", m, other)
                continue
            a = max(float(scores[m].loc[shared].mean()), SCORE_FLOOR)
            b = max(float(scores[other].loc[shared].mean()), SCORE_FLOOR)
            logs.append(np.log(a) - np.log(b))
        theta[m] = float(np.mean(logs)) if logs else None
    if theta[baseline] is None:
        raise UndefinedScoreError(f"baseline {baseline!r} shares no tasks with any model")
    return {m: (None if t is None else float(np.exp(t - theta[baseline]))) for m, t in theta.items()}


# ---------------------------------------------------------------- revisions

@dataclass(frozen=True)
class RevisionDiagnostic:
    location: str
    epiweek: int
    initial: float
    final: float

    @property
    def magnitude(self) -> float:
        return abs(self.final - self.initial)

    @property
    def relative_to_final(self) -> float:
        return self.magnitude / (self.final + 1.0)

    @property
    def relative_to_initial(self) -> float:
        return self.magnitude / (self.initial + 1.0)


def revision_diagnostics(revision_log: dict) -> list:
    return [RevisionDiagnostic(loc, ew, ini, fin) for (loc, ew), (ini, fin) in sorted(revision_log.items())]


def revision_filter(tasks, revision_log: dict | None, threshold: float = 10.0) -> list:
    """Drop tasks whose last observed week (d - 1) was later revised by >= ``threshold``.

    ``revision_log`` maps ``(location, epiweek_code)`` to ``(initial, final)``.
    A missing log leaves the tasks unchanged.
    """
    tasks = list(tasks)
    if revision_log is None:
        log.warning("no revision log available; revision filter skipped")
        return tasks
    keep = []
    for t in tasks:
        rec = revision_log.get((t.location, t.last_data_week.to_int()))
        if rec is not None and abs(rec[1] - rec[0]) >= threshold:
            continue
        keep.append(t)
    return keep
