"""Workload traces: job profiles, the JSON-lines trace format, a seeded
synthetic generator and a cycle profiler for raw execution events."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    InsufficientData,
    InvalidSpec,
    InvariantViolation,
    MalformedTrace,
    NoPeriodicity,
)

EPS = 1e-9

# training-side phase names used for bubble accounting
TRAINING_PHASES = ("compute_log_prob", "update_actor", "sync_weight")


@dataclass(frozen=True)
class JobProfile:
    """Periodic demand signature of one job.

    ``segments`` are ``(offset, duration)`` pairs in seconds inside one period;
    they describe when the job needs its node groups.
    """

    job_id: str
    period: float
    segments: tuple[tuple[float, float], ...]
    node_demand: int = 1
    state_bytes: int = 0
    phase_costs: dict[str, float] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple((float(a), float(d)) for a, d in self.segments))
        self.validate()

    def validate(self) -> None:
        if not self.period > 0:
            raise InvariantViolation(f"{self.job_id}: period must be > 0, got {self.period}")
        if self.node_demand < 1:
            raise InvariantViolation(f"{self.job_id}: node_demand must be >= 1")
        if self.state_bytes < 0:
            raise InvariantViolation(f"{self.job_id}: state_bytes must be >= 0")
        if not self.segments:
            raise InvariantViolation(f"{self.job_id}: at least one segment is required")
        prev_end = None
        for a, d in self.segments:
            if a < 0 or not d > 0:
                raise InvariantViolation(f"{self.job_id}: bad segment ({a}, {d})")
            if a + d > self.period + EPS:
                raise InvariantViolation(
                    f"{self.job_id}: segment ({a}, {d}) ends after period {self.period}"
                )
            if prev_end is not None and a < prev_end - EPS:
                raise InvariantViolation(f"{self.job_id}: segments overlap or are unsorted")
            prev_end = a + d
        for name, cost in self.phase_costs.items():
            if cost < 0:
                raise InvariantViolation(f"{self.job_id}: negative phase cost {name}")

    @property
    def active_time(self) -> float:
        return sum(d for _, d in self.segments)

    @property
    def duty_ratio(self) -> float:
        return self.active_time / self.period

    def slotted(self, slot_len: float = 1.0) -> tuple[int, list[tuple[int, int]]]:
        """Period and segments in whole slots; durations round up."""
        period = math.ceil(self.period / slot_len - EPS)
        out = []
        for a, d in self.segments:
            start = math.floor(a / slot_len + EPS)
            end = min(math.ceil((a + d) / slot_len - EPS), period)
            out.append((start, max(end - start, 1)))
        return period, out


@dataclass(frozen=True)
class TraceEntry:
    profile: JobProfile
    arrival: float = 0.0
    cycles: int = 1

    @property
    def job_id(self) -> str:
        return self.profile.job_id


@dataclass
class WorkloadTrace:
    jobs: list[TraceEntry]

    def __post_init__(self):
        seen = set()
        for entry in self.jobs:
            if entry.arrival < 0:
                raise InvariantViolation(f"{entry.job_id}: arrival must be >= 0")
            if entry.cycles < 1:
                raise InvariantViolation(f"{entry.job_id}: cycles must be >= 1")
            if entry.job_id in seen:
                raise InvariantViolation(f"duplicate job_id {entry.job_id}")
            seen.add(entry.job_id)

    def __len__(self) -> int:
        return len(self.jobs)

    def by_id(self) -> dict[str, TraceEntry]:
        return {e.job_id: e for e in self.jobs}


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def _number(rec: dict, key: str, idx: int, default=None, integer: bool = False):
    if key not in rec:
        if default is None:
            raise MalformedTrace(f"missing field {key!r}", idx)
        return default
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise MalformedTrace(f"field {key!r} must be a number", idx)
    if integer:
        if isinstance(val, float) and not val.is_integer():
            raise MalformedTrace(f"field {key!r} must be an integer", idx)
        return int(val)
    return float(val)


def entry_from_record(rec: dict, idx: int = 0) -> TraceEntry:
    if not isinstance(rec, dict):
        raise MalformedTrace("record must be a JSON object", idx)
    job_id = rec.get("job_id")
    if not isinstance(job_id, str) or not job_id:
        raise MalformedTrace("field 'job_id' must be a non-empty string", idx)
    segs = rec.get("segments")
    if not isinstance(segs, list):
        raise MalformedTrace("field 'segments' must be a list of [offset, duration]", idx)
    segments = []
    for s in segs:
        if (
            not isinstance(s, list)
            or len(s) != 2
            or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in s)
        ):
            raise MalformedTrace("each segment must be [offset, duration]", idx)
        segments.append((float(s[0]), float(s[1])))
    phases = rec.get("phases", {})
    if not isinstance(phases, dict) or any(
        isinstance(v, bool) or not isinstance(v, (int, float)) for v in phases.values()
    ):
        raise MalformedTrace("field 'phases' must map names to seconds", idx)
    try:
        profile = JobProfile(
            job_id=job_id,
            period=_number(rec, "period_s", idx),
            segments=tuple(segments),
            node_demand=_number(rec, "node_demand", idx, default=1, integer=True),
            state_bytes=_number(rec, "state_bytes", idx, default=0, integer=True),
            phase_costs={k: float(v) for k, v in phases.items()},
        )
    except InvariantViolation as exc:
        raise InvariantViolation(f"record {idx}: {exc}") from None
    return TraceEntry(
        profile,
        arrival=_number(rec, "arrival_s", idx, default=0.0),
        cycles=_number(rec, "cycles", idx, default=1, integer=True),
    )


def entry_to_record(entry: TraceEntry) -> dict:
    p = entry.profile
    return {
        "job_id": p.job_id,
        "arrival_s": entry.arrival,
        "period_s": p.period,
        "segments": [[a, d] for a, d in p.segments],
        "node_demand": p.node_demand,
        "state_bytes": p.state_bytes,
        "phases": dict(p.phase_costs),
        "cycles": entry.cycles,
    }


def loads_trace(text: str) -> WorkloadTrace:
    entries = []
    for idx, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(f"invalid JSON ({exc.msg})", idx) from None
        entries.append(entry_from_record(rec, idx))
    return WorkloadTrace(entries)


def dumps_trace(trace: WorkloadTrace) -> str:
    return "".join(json.dumps(entry_to_record(e), sort_keys=True) + "\n" for e in trace.jobs)


def parse_trace(path) -> WorkloadTrace:
    path = Path(path)
    if not path.is_file():
        raise MalformedTrace(f"trace file not found: {path}")
    return loads_trace(path.read_text(encoding="utf-8"))


def write_trace(trace: WorkloadTrace, path) -> None:
    Path(path).write_text(dumps_trace(trace), encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic workloads
# ---------------------------------------------------------------------------

PHASE_LAYOUTS = ("zero", "anti", "random")


@dataclass
class WorkloadSpec:
    """Generator parameters. Ranges are inclusive ``(lo, hi)`` pairs."""

    n_jobs: int
    period_range: tuple[float, float] = (100.0, 100.0)
    duty_range: tuple[float, float] = (0.5, 0.5)
    k_range: tuple[int, int] = (1, 1)
    cycles_range: tuple[int, int] = (10, 10)
    segments_range: tuple[int, int] = (1, 1)
    arrival_span: float = 0.0
    phase: str = "zero"
    period_choices: list[float] | None = None
    state_bytes_range: tuple[int, int] = (0, 0)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown generator fields: {sorted(unknown)}")
        if "n_jobs" not in d:
            raise InvalidSpec("generator spec needs n_jobs")
        kw = dict(d)
        for key in ("period_range", "duty_range", "k_range", "cycles_range",
                    "segments_range", "state_bytes_range"):
            if key in kw:
                val = kw[key]
                if isinstance(val, (int, float)) and not isinstance(val, bool):
                    val = [val, val]
                if not isinstance(val, (list, tuple)) or len(val) != 2:
                    raise InvalidSpec(f"{key} must be a [lo, hi] pair")
                kw[key] = tuple(val)
        return cls(**kw)

    def validate(self) -> None:
        if not isinstance(self.n_jobs, int) or self.n_jobs < 1:
            raise InvalidSpec("n_jobs must be a positive integer")
        for name in ("period_range", "duty_range", "k_range", "cycles_range",
                     "segments_range", "state_bytes_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidSpec(f"{name} is empty ({lo} > {hi})")
        if self.period_choices is not None:
            if not self.period_choices or min(self.period_choices) <= 0:
                raise InvalidSpec("period_choices must be non-empty and positive")
        elif self.period_range[0] <= 0:
            raise InvalidSpec("periods must be positive")
        lo, hi = self.duty_range
        if not (0 < lo <= 1 and 0 < hi <= 1):
            raise InvalidSpec(f"duty ratio must lie in (0, 1], got {self.duty_range}")
        if self.k_range[0] < 1 or self.cycles_range[0] < 1 or self.segments_range[0] < 1:
            raise InvalidSpec("node demand, cycles and segment counts must be >= 1")
        if self.state_bytes_range[0] < 0 or self.arrival_span < 0:
            raise InvalidSpec("state bytes and arrival span must be >= 0")
        if self.phase not in PHASE_LAYOUTS:
            raise InvalidSpec(f"phase must be one of {PHASE_LAYOUTS}")


def _split(rng: random.Random, total: int, parts: int, minimum: int) -> list[int]:
    """Split ``total`` into ``parts`` integers each >= ``minimum``."""
    free = total - parts * minimum
    cuts = sorted(rng.randint(0, free) for _ in range(parts - 1))
    bounds = [0] + cuts + [free]
    return [minimum + bounds[i + 1] - bounds[i] for i in range(parts)]


def synthesize_workload(spec: WorkloadSpec, seed: int) -> WorkloadTrace:
    spec.validate()
    rng = random.Random(seed)
    entries = []
    for i in range(spec.n_jobs):
        if spec.period_choices is not None:
            period = int(round(rng.choice(spec.period_choices)))
        else:
            period = rng.randint(int(round(spec.period_range[0])), int(round(spec.period_range[1])))
        period = max(period, 1)
        lo, hi = spec.duty_range
        duty = lo if lo == hi else rng.uniform(lo, hi)
        nseg = rng.randint(*spec.segments_range)
        active = min(period, max(nseg, int(round(duty * period))))
        nseg = min(nseg, active)
        idle = period - active
        durations = _split(rng, active, nseg, 1)
        # gaps[j] follows segment j; the last gap is trailing idle time
        gaps = _split(rng, idle, nseg, 0) if nseg > 1 else [idle]
        span = active + sum(gaps[:-1])
        if spec.phase == "zero":
            phase = 0
        elif spec.phase == "anti":
            phase = (i % 2) * (period - span)
        else:
            phase = rng.randint(0, period - span)
        segments, cursor = [], phase
        for d, g in zip(durations, gaps):
            segments.append((float(cursor), float(d)))
            cursor += d + g
        profile = JobProfile(
            job_id=f"job{i:03d}",
            period=float(period),
            segments=tuple(segments),
            node_demand=rng.randint(*spec.k_range),
            state_bytes=rng.randint(*spec.state_bytes_range),
            phase_costs={"rollout": float(idle), "update_actor": float(active)},
        )
        arrival = float(round(rng.uniform(0, spec.arrival_span))) if spec.arrival_span else 0.0
        entries.append(TraceEntry(profile, arrival=arrival, cycles=rng.randint(*spec.cycles_range)))
    return WorkloadTrace(entries)


# ---------------------------------------------------------------------------
# Cold-start profiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExecutionEvent:
    job_id: str
    phase_name: str
    start: float
    end: float

    def __post_init__(self):
        if not self.end > self.start:
            raise InvariantViolation(f"event {self.phase_name}: end must exceed start")


def parse_events(path) -> list[ExecutionEvent]:
    path = Path(path)
    if not path.is_file():
        raise MalformedTrace(f"event file not found: {path}")
    out = []
    for idx, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(ExecutionEvent(str(rec["job_id"]), str(rec["phase"]),
                                      float(rec["start"]), float(rec["end"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedTrace(f"bad event record ({exc})", idx) from None
    return out


def events_from_profile(profile: JobProfile, cycles: int, origin: float = 0.0,
                        phase_names: Sequence[str] | None = None) -> list[ExecutionEvent]:
    """Replay a profile as an event log (one event per segment per cycle)."""
    names = phase_names or [f"seg{j}" for j in range(len(profile.segments))]
    events = []
    for k in range(cycles):
        base = origin + k * profile.period
        for (a, d), name in zip(profile.segments, names):
            events.append(ExecutionEvent(profile.job_id, name, base + a, base + a + d))
    return events


def _mismatch(seq: np.ndarray, lag: int) -> float:
    n = len(seq) - lag
    return float(np.count_nonzero(seq[:n] != seq[lag:])) / n


def _detect_period(seq: np.ndarray, tolerance: float, min_overlap: float) -> int | None:
    """Smallest exact period, else the smallest lag that is a local minimum of
    the label mismatch curve and falls under ``tolerance``."""
    n = len(seq)
    max_lag = int(n / (1.0 + min_overlap))
    # a noise-free log is taken at its exact period; the tolerance would
    # otherwise accept near-periods of sparse or nearly symmetric patterns
    constant = n == 0 or bool(np.all(seq == seq[0]))
    for lag in range(1, 0 if constant else max_lag + 1):
        if not np.any(seq[:n - lag] != seq[lag:]):
            return lag
    prev = 0.0
    cur = _mismatch(seq, 1) if max_lag >= 1 else None
    for lag in range(1, max_lag + 1):
        # the neighbour past max_lag still counts for the local-minimum test
        nxt = _mismatch(seq, lag + 1) if lag + 1 < n else math.inf
        if cur <= tolerance and prev > cur and cur <= nxt:
            return lag
        prev, cur = cur, nxt
    return None


def profile_job(
    events: Iterable[ExecutionEvent],
    *,
    slot_len: float = 1.0,
    jitter_tolerance: float = 0.05,
    min_cycles: int = 1,
    origin: float = 0.0,
    node_demand: int = 1,
    state_bytes: int = 0,
    min_overlap: float = 0.5,
) -> JobProfile:
    """Extract a :class:`JobProfile` from the device-activity log of one job.

    The period is found by autocorrelating the per-slot phase-label sequence.
    Busy runs are then grouped cycle by cycle; offsets (relative to ``origin``
    plus whole periods) and durations are averaged over complete cycles.
    """
    events = sorted(events, key=lambda e: (e.start, e.end, e.phase_name))
    if not events:
        raise InsufficientData("no events")
    job_ids = {e.job_id for e in events}
    if len(job_ids) != 1:
        raise InvariantViolation(f"events mix several jobs: {sorted(job_ids)}")
    job_id = events[0].job_id

    base = math.floor(origin / slot_len + EPS)
    end_slot = max(math.ceil(e.end / slot_len - EPS) for e in events)
    n = end_slot - base
    labels: dict[str, int] = {}
    seq = np.zeros(n, dtype=np.int64)
    for e in events:
        lab = labels.setdefault(e.phase_name, len(labels) + 1)
        s = math.floor(e.start / slot_len + EPS) - base
        t = math.ceil(e.end / slot_len - EPS) - base
        if s < 0:
            raise InvariantViolation(f"event at {e.start} precedes origin {origin}")
        window = seq[s:t]
        window[window == 0] = lab

    lag = _detect_period(seq, jitter_tolerance, min_overlap)
    if lag is None:
        first = events[0].phase_name
        if sum(1 for e in events if e.phase_name == first) < 2:
            raise InsufficientData("the log does not cover one full cycle")
        raise NoPeriodicity(f"no lag matches within tolerance {jitter_tolerance}")

    busy = np.concatenate(([0], (seq != 0).astype(np.int8), [0]))
    edges = np.flatnonzero(np.diff(busy))
    runs = list(zip(edges[0::2].tolist(), edges[1::2].tolist()))
    per_cycle = sum(1 for s, _ in runs if s < lag)
    if per_cycle == 0:
        raise NoPeriodicity("first cycle has no device activity")
    n_cycles = len(runs) // per_cycle
    if n_cycles < max(min_cycles, 1):
        raise InsufficientData(f"only {n_cycles} complete cycle(s) observed")

    offsets = np.zeros(per_cycle)
    durations = np.zeros(per_cycle)
    for g in range(n_cycles):
        for j in range(per_cycle):
            s, t = runs[g * per_cycle + j]
            offsets[j] += s - g * lag
            durations[j] += t - s
    offsets /= n_cycles
    durations /= n_cycles

    period = lag * slot_len
    segments = []
    for a, d in zip(offsets * slot_len, durations * slot_len):
        a = max(float(a), 0.0)
        if segments and a < segments[-1][0] + segments[-1][1]:
            a = segments[-1][0] + segments[-1][1]
        d = min(float(d), period - a)
        if d <= 0:
            raise NoPeriodicity("averaged segments collapse; jitter too large")
        segments.append((a, d))

    span_end = (base + runs[n_cycles * per_cycle - 1][1]) * slot_len
    costs: dict[str, float] = {}
    for e in events:
        if e.start < span_end:
            costs[e.phase_name] = costs.get(e.phase_name, 0.0) + (e.end - e.start)
    phase_costs = {k: v / n_cycles for k, v in costs.items()}

    return JobProfile(
        job_id=job_id,
        period=period,
        segments=tuple(segments),
        node_demand=node_demand,
        state_bytes=state_bytes,
        phase_costs=phase_costs,
    )
