"""Equal-weight quantile averaging of component forecasts."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .core import QuantileForecast
from .exceptions import AlignmentError

log = logging.getLogger(__name__)

FLUSION_MEMBERS = ("gbqr", "gbqr_no_level", "arx")


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        object.__setattr__(self, "members", tuple(self.members))

    @property
    def model_id(self) -> str:
        if tuple(sorted(self.members)) == tuple(sorted(FLUSION_MEMBERS)):
            return "flusion"
        return "__".join(self.members)


def quantile_average(forecasts) -> QuantileForecast:
    """Level-wise mean of member forecasts for one task."""
    forecasts = list(forecasts)
    if not forecasts:
        raise AlignmentError("no member forecasts to average")
    task = forecasts[0].task
    for f in forecasts[1:]:
        if f.task != task:
            raise AlignmentError(f"member tasks differ: {task} vs {f.task}")
        if len(f.values) != len(forecasts[0].values):
            raise AlignmentError("members use different numbers of quantile levels")
    q = np.mean([f.as_array() for f in forecasts], axis=0)
    return QuantileForecast.repaired(task, q, clip_zero=False)


def combine(spec: EnsembleSpec, component_forecasts: dict) -> list:
    """Average ``spec.members`` task by task.

    ``component_forecasts`` maps a member id to its forecasts. Tasks not
    covered by every member are dropped with a warning.
    """
    missing = [m for m in spec.members if m not in component_forecasts]
    if missing:
        raise AlignmentError(f"no forecasts for members {missing}")
    by_member = [{f.task: f for f in component_forecasts[m]} for m in spec.members]
    common = set(by_member[0])
    for d in by_member[1:]:
        common &= set(d)
    dropped = set().union(*by_member) - common
    if dropped:
        log.warning("%s: dropping %d tasks not covered by every member", spec.model_id, len(dropped))
    order = [t for t in by_member[0] if t in common]
    return [quantile_average([d[t] for d in by_member]) for t in order]


def assemble_flusion(gbqr, gbqr_no_level, arx) -> dict:
    """The three-member ensemble plus every two-member pair, keyed by model id."""
    comps = {"gbqr": list(gbqr), "gbqr_no_level": list(gbqr_no_level), "arx": list(arx)}
    out = {}
    for pair in itertools.combinations(FLUSION_MEMBERS, 2):
        spec = EnsembleSpec(pair)
        out[spec.model_id] = combine(spec, comps)
    out["flusion"] = combine(EnsembleSpec(FLUSION_MEMBERS), comps)
    return out
