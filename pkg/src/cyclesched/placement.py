"""Cold/warm job placement on the cyclic timeline.

Warm placement shifts a job's periodic demand by a bounded micro-shift so that
every occurrence lands in free windows of its node groups, then ranks the
feasible groups by predicted interference with the jobs already resident.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InvalidConfig, NoCapacity, NoFeasibleShift, PreconditionError
from .timeline import (
    CapacityProfile,
    IntervalSet,
    Reservation,
    commit_reservation,
    release_reservation,
    ring_ranges,
)
from .trace import JobProfile

Segments = Sequence[tuple[int, int]]


@dataclass(frozen=True)
class PlacementConfig:
    w1: float = 1.0
    w2: float = 1.0
    alpha: float = 0.5
    interference_weighting: bool = False
    max_overlap_fraction: float = 1.0

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or (self.w1 == 0 and self.w2 == 0):
            raise InvalidConfig("w1 and w2 must be >= 0 and not both zero")
        if not 0 < self.alpha <= 1:
            raise InvalidConfig("alpha must lie in (0, 1]")
        if self.max_overlap_fraction < 0:
            raise InvalidConfig("max_overlap_fraction must be >= 0")


@dataclass(frozen=True)
class PlacementDecision:
    job_id: str
    node_group_ids: tuple[int, ...]
    delta: int
    cost: float
    mode: str
    reservation: Reservation
    origin_slot: int
    end_slot: int = 0

    @property
    def start_slot(self) -> int:
        """Absolute slot where the job's first (shifted) cycle begins."""
        return self.origin_slot + self.delta


def scheduling_cost(delta: float, segments: Segments, period: float, cfg: PlacementConfig) -> float:
    # completion delay can be negative when the last segment ends before T
    t_end = delta + max(a + d for a, d in segments)
    return cfg.w1 * (t_end - period) / period + cfg.w2 * delta / period


def occurrences(segments: Segments, period: int, delta: int, *, origin: int = 0,
                cycles: int = 1, limit: int | None = None) -> list[tuple[int, int]]:
    """Absolute ``[start, end)`` slot ranges of every shifted segment occurrence.

    Occurrences at or beyond ``origin + limit`` are dropped and one crossing it
    is clipped, so the footprint never exceeds one ring length.
    """
    out = []
    stop = None if limit is None else origin + limit
    for k in range(cycles):
        base = origin + delta + k * period
        for a, d in segments:
            s, e = base + a, base + a + d
            if stop is not None:
                if s >= stop:
                    return out
                e = min(e, stop)
            out.append((s, e))
    return out


def _fits(windows: IntervalSet, s: int, e: int, ring: int | None) -> bool:
    if ring is None:
        return windows.fits(s, e - s)
    return all(windows.fits(a, b - a) for a, b in ring_ranges(s, e, ring))


def _jump(windows: IntervalSet, s: int, e: int, ring: int | None) -> int | None:
    """Lower bound on how far a failing occurrence must move to fit."""
    d = e - s
    p = s if ring is None else s % ring
    q = windows.next_fit(p, d)
    if q is not None:
        return max(q - p, 1)
    if ring is None:
        return None
    # only seam-crossing placements or the next lap remain
    return max(ring - d + 1 - p, 1)


def micro_shift_search(segments: Segments, period: int, windows: IntervalSet,
                       cfg: PlacementConfig, *, origin: int = 0, cycles: int = 1,
                       ring: int | None = None, limit: int | None = None,
                       start_delta: int = 0) -> tuple[int, float]:
    """Smallest-cost micro-shift so every segment occurrence fits a free window.

    The cost grows strictly with the shift, so the first feasible shift is
    optimal; infeasible shifts are skipped by jumping to the next window
    boundary that could host the failing occurrence.
    """
    if not segments:
        raise ValueError("segments must be non-empty")
    max_delta = math.floor(cfg.alpha * period + 1e-9)
    delta = start_delta
    while delta <= max_delta:
        step = 0
        for s, e in occurrences(segments, period, delta, origin=origin, cycles=cycles, limit=limit):
            if not _fits(windows, s, e, ring):
                step = _jump(windows, s, e, ring)
                break
        if step == 0:
            return delta, scheduling_cost(delta, segments, period, cfg)
        if step is None:
            break
        delta += step
    raise NoFeasibleShift(f"no shift in [0, {max_delta}] fits the free windows")


def gang_feasible(profile: CapacityProfile, k: int, t0: float, d: float) -> bool:
    if k <= 0:
        return True
    return profile.range_min_capacity(t0, t0 + d) >= k


# ---------------------------------------------------------------------------
# Interference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidentPattern:
    """Periodic activity of a resident job in absolute slot coordinates."""

    segments: tuple[tuple[int, int], ...]
    period: int
    phase: int


@dataclass(frozen=True)
class Candidate:
    group_id: int
    delta: int
    cost: float
    residents: tuple[ResidentPattern, ...] = ()


def _merge(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for s, e in sorted(intervals):
        if out and s <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], e))
        else:
            out.append((s, e))
    return out


def _pattern_overlap(lo: int, hi: int, res: ResidentPattern, guard: int) -> int:
    """Slots of ``[lo, hi)`` covered by the resident's (dilated) activity."""
    k0 = (lo - res.phase - guard) // res.period - 1
    k1 = (hi - res.phase + guard) // res.period + 1
    spans = []
    for k in range(k0, k1 + 1):
        base = res.phase + k * res.period
        for a, d in res.segments:
            s, e = max(base + a - guard, lo), min(base + a + d + guard, hi)
            if e > s:
                spans.append((s, e))
    return sum(e - s for s, e in _merge(spans))


def interference_score(segments: Segments, delta: int, residents: Sequence[ResidentPattern], *,
                       origin: int = 0, guard: int = 0, weighting: bool = False) -> int:
    """Overlap (slots per period) of the shifted job with resident activity.

    ``guard`` widens resident segments by the slots a context switch needs.
    With ``weighting`` direct overlap with a resident segment counts twice and
    overlap with its guard band once.
    """
    total = 0
    for res in residents:
        for a, d in segments:
            lo = origin + delta + a
            hi = lo + d
            band = _pattern_overlap(lo, hi, res, guard)
            total += band
            if weighting:
                total += band if guard == 0 else _pattern_overlap(lo, hi, res, 0)
    return total


def rank_by_interference(candidates: Sequence[Candidate], segments: Segments, *,
                         origin: int = 0, guard: int = 0,
                         weighting: bool = False) -> list[tuple[int, Candidate]]:
    """Candidates ordered by (interference, cost, group id), each with its score."""
    scored = [
        (interference_score(segments, c.delta, c.residents, origin=origin, guard=guard,
                            weighting=weighting), c)
        for c in candidates
    ]
    scored.sort(key=lambda sc: (sc[0], sc[1].cost, sc[1].group_id))
    return scored


# ---------------------------------------------------------------------------
# Cluster state and placement driver
# ---------------------------------------------------------------------------

@dataclass
class PlacedJob:
    profile: JobProfile
    period: int
    segments: tuple[tuple[int, int], ...]
    decision: PlacementDecision

    def pattern(self) -> ResidentPattern:
        return ResidentPattern(self.segments, self.period, self.decision.start_slot)


@dataclass
class PlacementStats:
    shift_checks: int = 0
    rmq_checks: int = 0
    rmq_pruned: int = 0

    @property
    def pruned_fraction(self) -> float:
        return self.rmq_pruned / self.rmq_checks if self.rmq_checks else 0.0


class ClusterState:
    """Capacity profile, per-group free windows and committed placements."""

    def __init__(self, total_groups: int, horizon: float = 28_800.0, slot_len: float = 1.0):
        self.profile = CapacityProfile(total_groups, horizon, slot_len)
        self.groups = [IntervalSet.full(self.profile.slots) for _ in range(total_groups)]
        self.placed: dict[str, PlacedJob] = {}
        self.stats = PlacementStats()

    @property
    def ring(self) -> int:
        return self.profile.slots

    @property
    def slot_len(self) -> float:
        return self.profile.slot_len

    def residents(self, group: int) -> list[str]:
        return [j for j, p in self.placed.items() if group in p.decision.node_group_ids]

    def is_empty(self, group: int) -> bool:
        return self.groups[group].windows == [(0, self.ring)]

    def commit(self, placed: PlacedJob) -> None:
        commit_reservation(self.profile, self.groups, placed.decision.reservation)
        self.placed[placed.profile.job_id] = placed

    def release(self, job_id: str) -> PlacedJob:
        placed = self.placed.pop(job_id)
        release_reservation(self.profile, self.groups, placed.decision.reservation)
        return placed

    def state_key(self) -> tuple:
        return (self.profile.snapshot(), tuple(tuple(g.windows) for g in self.groups),
                tuple(sorted(self.placed)))


@dataclass(frozen=True)
class AdmissionSLO:
    """Rejects sharing that would push a job's projected wait fraction past
    ``bound``; ``setup_slots`` is the context-switch cost in slots."""

    bound: float = 0.5
    setup_slots: int = 0


def projected_wait_fraction(n_segments: int, period: int, setup_slots: int, shared: bool) -> float:
    if not shared:
        return 0.0
    return n_segments * setup_slots / period


def _slo_ok(cluster: ClusterState, group: int, n_segments: int, period: int,
            slo: AdmissionSLO | None) -> bool:
    if slo is None:
        return True
    others = cluster.residents(group)
    if not others:
        return True
    if projected_wait_fraction(n_segments, period, slo.setup_slots, True) > slo.bound:
        return False
    for jid in others:
        p = cluster.placed[jid]
        if projected_wait_fraction(len(p.segments), p.period, slo.setup_slots, True) > slo.bound:
            return False
    return True


def _reservation_ranges(occ: list[tuple[int, int]], ring: int) -> tuple[tuple[int, int], ...]:
    pieces = []
    for s, e in occ:
        pieces.extend(ring_ranges(s, e, ring))
    return tuple(sorted(pieces))


def _cold(job: JobProfile, cluster: ClusterState, now_slot: int, duration_slots: int,
          cfg: PlacementConfig) -> PlacedJob:
    k = job.node_demand
    empty = [g for g in range(len(cluster.groups)) if cluster.is_empty(g)]
    if len(empty) < k:
        raise NoCapacity(f"{job.job_id}: needs {k} empty groups, {len(empty)} available")
    groups = tuple(empty[:k])
    span = min(max(duration_slots, 1), cluster.ring)
    res = Reservation(job.job_id, groups, _reservation_ranges([(now_slot, now_slot + span)], cluster.ring))
    period, segs = job.slotted(cluster.slot_len)
    decision = PlacementDecision(job.job_id, groups, 0, scheduling_cost(0, segs, period, cfg), "cold", res,
                                 now_slot, now_slot + span)
    return PlacedJob(job, period, tuple(segs), decision)


def place_job(job: JobProfile, cluster: ClusterState, cfg: PlacementConfig, mode: str = "warm", *,
              now: float = 0.0, cycles: int = 1, profiling_duration: float | None = None,
              order: str = "spread", guard: int = 0, slo: AdmissionSLO | None = None) -> PlacementDecision:
    """Place and atomically commit ``job``; raises :class:`NoCapacity` untouched.

    ``order`` selects how feasible groups are chosen: ``"spread"`` ranks by
    interference, ``"pack"`` takes the first fit among the most loaded groups.
    """
    now_slot = math.ceil(now / cluster.slot_len - 1e-9)
    period, segs = job.slotted(cluster.slot_len)
    if mode == "cold":
        if profiling_duration is None:
            profiling_duration = period * cycles * cluster.slot_len
        dur = math.ceil(profiling_duration / cluster.slot_len - 1e-9)
        placed = _cold(job, cluster, now_slot, dur, cfg)
        cluster.commit(placed)
        return placed.decision
    if mode != "warm":
        raise ValueError(f"unknown placement mode {mode!r}")

    k = job.node_demand
    if k > len(cluster.groups):
        raise NoCapacity(f"{job.job_id}: gang of {k} exceeds {len(cluster.groups)} groups")
    if order == "pack":
        cfg = PlacementConfig(w1=cfg.w1 or 1.0, w2=0.0, alpha=cfg.alpha,
                              interference_weighting=cfg.interference_weighting,
                              max_overlap_fraction=cfg.max_overlap_fraction)
    ring = cluster.ring
    limit = min(ring, period * cycles + math.floor(cfg.alpha * period))
    eligible = [g for g in range(len(cluster.groups))
                if _slo_ok(cluster, g, len(segs), period, slo)]
    active = sum(d for _, d in segs)

    def search(g: int, start: int) -> int | None:
        cluster.stats.shift_checks += 1
        try:
            d, _ = micro_shift_search(segs, period, cluster.groups[g], cfg, origin=now_slot,
                                      cycles=cycles, ring=ring, limit=limit, start_delta=start)
        except NoFeasibleShift:
            return None
        return d

    def residents_of(g: int) -> tuple[ResidentPattern, ...]:
        return tuple(cluster.placed[j].pattern() for j in cluster.residents(g))

    def gang_ok(delta: int) -> bool:
        cluster.stats.rmq_checks += 1
        for s, e in occurrences(segs, period, delta, origin=now_slot, cycles=cycles, limit=limit):
            if cluster.profile.min_slots(s, e) < k:
                cluster.stats.rmq_pruned += 1
                return False
        return True

    def choose(cands: list[Candidate]) -> list[Candidate]:
        if order == "pack":
            load = {g: len(cluster.residents(g)) for g in eligible}
            return sorted(cands, key=lambda c: (-load[c.group_id], c.group_id))
        ranked = rank_by_interference(cands, segs, origin=now_slot, guard=guard,
                                      weighting=cfg.interference_weighting)
        limit_score = cfg.max_overlap_fraction * active * (2 if cfg.interference_weighting else 1)
        return [c for score, c in ranked if score <= limit_score + 1e-9]

    chosen: list[Candidate] = []
    delta = 0
    max_delta = math.floor(cfg.alpha * period + 1e-9)
    if k == 1:
        # each group may take its own shift, so rank across per-group optima
        cands = []
        for g in eligible:
            d = search(g, 0)
            if d is not None:
                cands.append(Candidate(g, d, scheduling_cost(d, segs, period, cfg), residents_of(g)))
        ordered = choose(cands)
        if ordered:
            chosen = ordered[:1]
            delta = chosen[0].delta
    else:
        while delta <= max_delta:
            if not gang_ok(delta):
                delta += 1
                continue
            mins = {g: search(g, delta) for g in eligible}
            at = [Candidate(g, delta, scheduling_cost(delta, segs, period, cfg), residents_of(g))
                  for g, v in mins.items() if v == delta]
            ordered = choose(at)
            if len(ordered) >= k:
                chosen = ordered[:k]
                break
            vals = sorted(v for v in mins.values() if v is not None)
            if len(vals) < k:
                break
            delta = max(delta + 1, vals[k - 1])
    if len(chosen) < k:
        raise NoCapacity(f"{job.job_id}: no feasible warm placement")

    groups = tuple(sorted(c.group_id for c in chosen))
    occ = occurrences(segs, period, delta, origin=now_slot, cycles=cycles, limit=limit)
    res = Reservation(job.job_id, groups, _reservation_ranges(occ, ring))
    end = min(now_slot + delta + cycles * period, now_slot + limit)
    decision = PlacementDecision(job.job_id, groups, delta, scheduling_cost(delta, segs, period, cfg),
                                 "warm", res, now_slot, end)
    cluster.commit(PlacedJob(job, period, tuple(segs), decision))
    return decision


def repack(cluster: ClusterState, job: JobProfile | None, cfg: PlacementConfig, *,
           now: float = 0.0, cycles: int = 1, **kwargs) -> PlacementDecision:
    """Swap a cold-start reservation for a warm one; restores it on failure."""
    if job is None:
        raise PreconditionError("repack needs a profiled job")
    placed = cluster.placed.get(job.job_id)
    if placed is None or placed.decision.mode != "cold":
        raise PreconditionError(f"{job.job_id} holds no cold-start reservation")
    cluster.release(job.job_id)
    try:
        return place_job(job, cluster, cfg, "warm", now=now, cycles=cycles, **kwargs)
    except NoCapacity:
        cluster.commit(placed)
        raise
