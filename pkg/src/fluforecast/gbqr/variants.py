"""Named GBQR model variations used in the ablation experiments."""
from __future__ import annotations

from dataclasses import dataclass

KINDS = ("full", "no_level", "only_nhsn", "by_location", "no_transform", "no_reporting_adj")


@dataclass(frozen=True)
class GbqrVariant:
    """One GBQR configuration.

    ``location`` is required for (and only allowed with) ``by_location``.
    """

    kind: str = "full"
    location: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown GBQR variant {self.kind!r}; expected one of {KINDS}")
        if (self.kind == "by_location") != (self.location is not None):
            raise ValueError("a location is required for by_location and only for it")

    @property
    def no_level(self) -> bool:
        return self.kind == "no_level"

    @property
    def only_nhsn(self) -> bool:
        return self.kind == "only_nhsn"

    @property
    def by_location(self) -> bool:
        return self.kind == "by_location"

    @property
    def no_transform(self) -> bool:
        return self.kind == "no_transform"

    @property
    def no_reporting_adj(self) -> bool:
        return self.kind == "no_reporting_adj"

    @property
    def model_id(self) -> str:
        return "gbqr" if self.kind == "full" else f"gbqr_{self.kind}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "location": self.location}

    @classmethod
    def from_dict(cls, d: dict) -> "GbqrVariant":
        return cls(d["kind"], d.get("location"))
