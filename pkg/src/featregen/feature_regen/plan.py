from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..conv_analysis import FilterRanking, l1_rank_filters

MAX_UNITS = 6


@dataclass
class PlanEntry:
    layer_id: str
    s_reg: list[int]
    s_adv: list[int]

    @property
    def channels(self) -> int:
        return len(self.s_reg) + len(self.s_adv)


@dataclass
class RegenerationPlan:
    """Which conv layers get a unit and which of their filters it regenerates."""

    entries: list[PlanEntry]
    regeneration_ratio: float
    unit_count: int = 0
    rankings: dict[str, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.unit_count = len(self.entries)
        self.validate()

    def validate(self, channel_counts: dict[str, int] | None = None) -> None:
        if not 0 < self.regeneration_ratio <= 1:
            raise ValueError("regeneration ratio must be in (0, 1]")
        if self.unit_count > MAX_UNITS:
            raise ValueError(f"at most {MAX_UNITS} units, got {self.unit_count}")
        seen = set()
        for e in self.entries:
            if e.layer_id in seen:
                raise ValueError(f"layer {e.layer_id!r} planned twice")
            seen.add(e.layer_id)
            if set(e.s_reg) & set(e.s_adv):
                raise ValueError(f"{e.layer_id}: s_reg and s_adv overlap")
            n = channel_counts[e.layer_id] if channel_counts else e.channels
            if sorted(e.s_reg + e.s_adv) != list(range(n)):
                raise ValueError(f"{e.layer_id}: s_reg and s_adv do not partition {n} filters")
            if len(e.s_reg) != math.ceil(self.regeneration_ratio * n - 1e-9):
                raise ValueError(f"{e.layer_id}: |s_reg|={len(e.s_reg)} inconsistent with ratio")

    def entry(self, layer_id: str) -> PlanEntry:
        for e in self.entries:
            if e.layer_id == layer_id:
                return e
        raise LookupError(f"layer {layer_id!r} not in plan")

    @property
    def layer_ids(self) -> list[str]:
        return [e.layer_id for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "regeneration_ratio": self.regeneration_ratio,
            "unit_count": self.unit_count,
            "entries": [{"layer_id": e.layer_id, "s_reg": e.s_reg, "s_adv": e.s_adv} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegenerationPlan":
        return cls([PlanEntry(e["layer_id"], list(e["s_reg"]), list(e["s_adv"])) for e in d["entries"]],
                   d["regeneration_ratio"])


def unit_sites(conv_layer_ids: list[str], max_units: int = MAX_UNITS) -> list[str]:
    """Unit placement: conv 1, 3, 5, ... first, then 2, 4, 6, ... until the budget."""
    if max_units < 1:
        raise ValueError("max_units must be at least 1")
    if max_units > MAX_UNITS:
        raise ValueError(f"max_units is capped at {MAX_UNITS}")
    order = conv_layer_ids[0::2] + conv_layer_ids[1::2]
    return order[: min(len(conv_layer_ids), max_units)]


def plan_regeneration(model, rankings: dict[str, FilterRanking] | None = None, ratio: float = 0.5,
                      max_units: int = MAX_UNITS) -> RegenerationPlan:
    """Choose unit sites and regenerate the top ``ceil(ratio * F)`` ranked filters of each.

    ``rankings`` maps layer id to :class:`FilterRanking`; when omitted the
    l1 ranking of the model's own kernels is used.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    sites = unit_sites(model.conv_layer_ids, max_units)
    if rankings is None:
        rankings = {lid: l1_rank_filters(model.kernel(lid), lid) for lid in sites}
    entries, used = [], {}
    for lid in sites:
        if lid not in rankings:
            raise LookupError(f"no ranking for planned layer {lid!r}")
        r = rankings[lid]
        n = len(r.order)
        k = math.ceil(ratio * n - 1e-9)
        reg = sorted(int(i) for i in r.order[:k])
        adv = sorted(set(range(n)) - set(reg))
        entries.append(PlanEntry(lid, reg, adv))
        used[lid] = [int(i) for i in r.order]
    plan = RegenerationPlan(entries, ratio, rankings=used)
    plan.validate({lid: model.kernel(lid).out_channels for lid in sites})
    return plan
