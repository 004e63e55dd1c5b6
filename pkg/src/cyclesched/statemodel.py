"""Tiered model-state residency on one node: device, host and cold storage.

State is indexed by logical keys so that replicas of the same tensor group
are stored once.  Only bytes and seconds are tracked; no data moves.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import TierFull

GB = 1_000_000_000


class Tier(enum.IntEnum):
    COLD = 0
    HOST = 1
    DEVICE = 2


@dataclass(frozen=True)
class TransferModel:
    # default device<->host bandwidth moves a 19 GB optimizer state in 19 s
    bw_device_host: float = 1.0 * GB
    bw_host_cold: float = 0.5 * GB
    fixed_latency: float = 0.0

    def __post_init__(self):
        if not (self.bw_device_host > 0 and self.bw_host_cold > 0):
            raise ValueError("bandwidths must be > 0")
        if self.fixed_latency < 0:
            raise ValueError("fixed_latency must be >= 0")

    def hop_time(self, size: int, a: Tier, b: Tier) -> float:
        """Seconds to move ``size`` bytes across one adjacent tier boundary."""
        bw = self.bw_device_host if Tier.HOST in (a, b) and Tier.DEVICE in (a, b) else self.bw_host_cold
        return size / bw + self.fixed_latency


@dataclass
class Entry:
    tier: Tier
    size: int
    ref_count: int = 1


@dataclass
class ResidencySnapshot:
    """Logical key -> residency entry, with per-tier byte budgets.

    Entries are kept in least-recently-used order (oldest first).
    """

    capacity: dict[Tier, float] = field(default_factory=lambda: {
        Tier.DEVICE: float("inf"), Tier.HOST: float("inf"), Tier.COLD: float("inf")})
    entries: "OrderedDict[str, Entry]" = field(default_factory=OrderedDict)
    pinned: set[str] = field(default_factory=set)

    def used(self, tier: Tier) -> int:
        return sum(e.size for e in self.entries.values() if e.tier == tier)

    @property
    def tier_used(self) -> dict[Tier, int]:
        return {t: self.used(t) for t in Tier}

    def total_bytes(self) -> int:
        return sum(e.size for e in self.entries.values())

    def copy(self) -> "ResidencySnapshot":
        return ResidencySnapshot(
            dict(self.capacity),
            OrderedDict((k, Entry(e.tier, e.size, e.ref_count)) for k, e in self.entries.items()),
            set(self.pinned),
        )

    def restore(self, other: "ResidencySnapshot") -> None:
        self.capacity, self.entries, self.pinned = other.capacity, other.entries, other.pinned

    def tier_of(self, key: str) -> Tier:
        return self.entries[key].tier

    def touch(self, key: str) -> None:
        self.entries.move_to_end(key)


def dedup_put(snap: ResidencySnapshot, key: str, size: int, replica_count: int = 1,
              tier: Tier = Tier.HOST) -> ResidencySnapshot:
    """Store ``key`` once no matter how many replicas share it."""
    if size <= 0 or replica_count < 1:
        raise ValueError("size must be > 0 and replica_count >= 1")
    if key in snap.entries:
        e = snap.entries[key]
        e.ref_count = max(e.ref_count, replica_count)
        snap.touch(key)
        return snap
    if snap.used(tier) + size > snap.capacity[tier]:
        backup = snap.copy()
        try:
            _make_room(snap, tier, size, None)
        except TierFull:
            snap.restore(backup)
            raise
    snap.entries[key] = Entry(tier, size, replica_count)
    return snap


def drop(snap: ResidencySnapshot, key: str) -> ResidencySnapshot:
    snap.entries.pop(key, None)
    snap.pinned.discard(key)
    return snap


def _make_room(snap: ResidencySnapshot, tier: Tier, need: int, model: TransferModel | None,
               protect: Iterable[str] = ()) -> float:
    """Evict LRU unpinned keys one tier down until ``need`` bytes fit."""
    protect = set(protect)
    elapsed = 0.0
    while snap.used(tier) + need > snap.capacity[tier]:
        victim = next((k for k, e in snap.entries.items()
                       if e.tier == tier and k not in snap.pinned and k not in protect), None)
        if victim is None or tier == Tier.COLD:
            raise TierFull(f"{tier.name} cannot fit {need} more bytes")
        lower = Tier(tier - 1)
        size = snap.entries[victim].size
        elapsed += _make_room(snap, lower, size, model, protect)
        snap.entries[victim].tier = lower
        if model is not None:
            elapsed += model.hop_time(size, tier, lower)
    return elapsed


def _move(snap: ResidencySnapshot, keys: Iterable[str], target: Tier, model: TransferModel,
          up: bool) -> float:
    keys = list(dict.fromkeys(keys))
    for k in keys:
        if k not in snap.entries:
            raise KeyError(k)
    backup = snap.copy()
    elapsed = 0.0
    try:
        for k in keys:
            e = snap.entries[k]
            while (e.tier < target) if up else (e.tier > target):
                nxt = Tier(e.tier + 1) if up else Tier(e.tier - 1)
                if snap.used(nxt) + e.size > snap.capacity[nxt]:
                    elapsed += _make_room(snap, nxt, e.size, model, protect=keys)
                elapsed += model.hop_time(e.size, e.tier, nxt)
                e.tier = nxt
            snap.touch(k)
    except TierFull:
        snap.restore(backup)
        raise
    return elapsed


def ensure_resident(snap: ResidencySnapshot, keys: Iterable[str], model: TransferModel,
                    target: Tier = Tier.DEVICE) -> tuple[ResidencySnapshot, float]:
    """Promote ``keys`` hop by hop; keys already at or above ``target`` are free."""
    return snap, _move(snap, keys, target, model, up=True)


def offload(snap: ResidencySnapshot, keys: Iterable[str], model: TransferModel,
            target: Tier = Tier.HOST) -> tuple[ResidencySnapshot, float]:
    if target == Tier.DEVICE:
        raise ValueError("offload target must be HOST or COLD")
    return snap, _move(snap, keys, target, model, up=False)


OFF_PATH_ACTIONS = {"offload", "prefetch", "drain", "host_optimizer_step", "checkpoint_materialize"}
ON_PATH_ACTIONS = {"load", "access", "update"}


def overlap_schedule(action: str, active_wpg_busy: bool = False, *, for_active: bool = True) -> bool:
    """Whether ``action`` sits on the accelerator critical path.

    Only work that touches the deployment about to execute (``for_active``)
    gates it; everything else is booked on a parallel lane.
    """
    if action in OFF_PATH_ACTIONS:
        return False
    if action in ON_PATH_ACTIONS:
        return for_active
    raise ValueError(f"unknown state action {action!r}")


def slice_layout(total_bytes: int, ranks: int) -> list[int]:
    """Even split of ``total_bytes`` over ``ranks``; remainders go to the first ranks."""
    base, extra = divmod(total_bytes, ranks)
    return [base + (1 if r < extra else 0) for r in range(ranks)]


def sync_or_migrate_cost(src_sizes: Mapping[str, int], layout: Mapping[int, Mapping[str, tuple[int, int]]],
                         model: TransferModel, bandwidth: float | None = None) -> float:
    """Cost of materializing a sharded state on destination ranks.

    ``layout`` maps rank -> key -> ``(offset, length)`` slice of that key.
    Slices of each key must tile it exactly once, so no byte is fetched twice.
    """
    bw = bandwidth or model.bw_device_host
    covered: dict[str, list[tuple[int, int]]] = {k: [] for k in src_sizes}
    per_rank = {}
    for rank, slices in layout.items():
        total = 0
        for key, (off, length) in slices.items():
            if key not in covered:
                raise ValueError(f"unknown key {key!r}")
            covered[key].append((off, off + length))
            total += length
        per_rank[rank] = total
    for key, spans in covered.items():
        pos = 0
        for s, e in sorted(spans):
            if s != pos:
                raise ValueError(f"slices of {key!r} do not tile it exactly once")
            pos = e
        if pos != src_sizes[key]:
            raise ValueError(f"slices of {key!r} do not cover its {src_sizes[key]} bytes")
    if not per_rank:
        return 0.0
    return max(b / bw for b in per_rank.values()) + model.fixed_latency


def even_layout(src_sizes: Mapping[str, int], ranks: int) -> dict[int, dict[str, tuple[int, int]]]:
    layout: dict[int, dict[str, tuple[int, int]]] = {r: {} for r in range(ranks)}
    for key, size in src_sizes.items():
        off = 0
        for r, length in enumerate(slice_layout(size, ranks)):
            if length:
                layout[r][key] = (off, length)
            off += length
    return layout
