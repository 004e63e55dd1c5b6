"""Metrics derived from a simulation event log."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from ..errors import IncompleteLog, PhaseExceedsCycle

EPS = 1e-9


def bubble_ratio(cycle_time: float, training_phases: Sequence[float]) -> float:
    """Fraction of a cycle the training side sits idle (unrounded)."""
    busy = sum(training_phases)
    if cycle_time <= 0 or busy > cycle_time + EPS:
        raise PhaseExceedsCycle(f"training phases {busy} exceed cycle {cycle_time}")
    return 1.0 - busy / cycle_time


def union_length(intervals: Iterable[tuple[float, float]]) -> float:
    total, end = 0.0, None
    start = None
    for s, e in sorted(intervals):
        if e <= s:
            continue
        if end is None or s > end:
            if end is not None:
                total += end - start
            start, end = s, e
        else:
            end = max(end, e)
    if end is not None:
        total += end - start
    return total


@dataclass
class JobMetrics:
    arrival: float
    completion_time: float
    wait_time: float
    job_duration: float
    normalized_delay: float
    duty_ratio: float
    wait_fraction: float
    slo_violation: bool
    bubble_ratio: float | None = None


@dataclass
class SimReport:
    policy: str
    jobs: dict[str, JobMetrics]
    makespan: float
    utilization: list[float]
    cdf: list[tuple[float, float]]
    events: list[dict] = field(default_factory=list)
    gantt: list[tuple[int, str, str, float, float]] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "makespan": self.makespan,
            "jobs": {j: asdict(m) for j, m in sorted(self.jobs.items())},
            "utilization": self.utilization,
            "slo_violations": sorted(j for j, m in self.jobs.items() if m.slo_violation),
            "mean_normalized_delay": (
                sum(m.normalized_delay for m in self.jobs.values()) / len(self.jobs) if self.jobs else 0.0
            ),
        }


def delay_cdf(values: Iterable[float]) -> list[tuple[float, float]]:
    vals = sorted(values)
    n = len(vals)
    out = []
    for i, v in enumerate(vals):
        if i + 1 < n and vals[i + 1] == v:
            continue
        out.append((v, (i + 1) / n))
    return out


def _exec_intervals(events: Sequence[dict]):
    """Per-(group, request) execution spans and per-request pending spans."""
    open_exec: dict[tuple, tuple[float, dict]] = {}
    spans = []  # (group, job, request, start, end, backfill, aborted)
    pending_since: dict[str, float] = {}
    pending = defaultdict(list)  # job -> intervals
    req_job: dict[str, str] = {}
    for ev in events:
        act, t = ev["action"], ev["t"]
        req = ev.get("request")
        if act == "ready":
            pending_since[req] = t
            req_job[req] = ev["job"]
        elif act in ("start", "rollout_start"):
            key = (ev.get("group"), req)
            if key in open_exec:
                raise IncompleteLog(f"{req} started twice on group {key[0]}")
            open_exec[key] = (t, ev)
            if req in pending_since:
                pending[ev["job"]].append((pending_since.pop(req), t))
        elif act in ("finish", "stop", "rollout_finish"):
            key = (ev.get("group"), req)
            if key not in open_exec:
                raise IncompleteLog(f"{act} of {req} without a start")
            t0, sev = open_exec.pop(key)
            spans.append((ev.get("group"), ev["job"], req, t0, t, bool(sev.get("backfill")), False))
            if act == "stop" and req not in pending_since:
                pending_since[req] = t
                req_job[req] = ev["job"]
        elif act == "abort":
            # discarded work: close whatever is open, the request is re-issued later
            key = (ev.get("group"), req)
            if key in open_exec:
                t0, sev = open_exec.pop(key)
                spans.append((key[0], ev["job"], req, t0, t, bool(sev.get("backfill")), True))
            if req in pending_since:
                pending[ev["job"]].append((pending_since.pop(req), t))
    if open_exec:
        key = sorted(open_exec, key=str)[0]
        raise IncompleteLog(f"{key[1]} on group {key[0]} never finished")
    if pending_since:
        req = sorted(pending_since)[0]
        raise IncompleteLog(f"{req} was never executed")
    return spans, pending


def compute_metrics(events: Sequence[dict], *, n_groups: int, duty_ratio_bound: float = 0.5,
                    policy: str = "") -> SimReport:
    arrivals, completions = {}, {}
    for ev in events:
        if ev["action"] == "arrive":
            arrivals[ev["job"]] = ev["t"]
        elif ev["action"] == "complete":
            completions[ev["job"]] = ev["t"]
    missing = sorted(set(arrivals) - set(completions))
    if missing:
        raise IncompleteLog(f"jobs never completed: {missing}")
    spans, pending = _exec_intervals(events)

    busy_by_group = defaultdict(float)
    run_by_job = defaultdict(float)
    active_by_job = defaultdict(float)
    seen = set()
    for group, job, req, s, e, _, aborted in spans:
        if group is not None:
            busy_by_group[group] += e - s
        key = (req, s)
        if aborted or key in seen:  # gang members share one logical execution
            continue
        seen.add(key)
        run_by_job[job] += e - s
        if group is not None:
            active_by_job[job] += e - s

    jobs = {}
    for job in sorted(arrivals):
        arrival, done = arrivals[job], completions[job]
        wait = union_length(pending.get(job, []))
        duration = run_by_job[job]
        wall = max(done - arrival, EPS)
        jobs[job] = JobMetrics(
            arrival=arrival,
            completion_time=done,
            wait_time=wait,
            job_duration=duration,
            normalized_delay=wait / duration if duration > 0 else 0.0,
            duty_ratio=active_by_job[job] / wall,
            wait_fraction=wait / wall,
            slo_violation=wait / wall > duty_ratio_bound + EPS,
        )
    makespan = max(completions.values(), default=0.0)
    util = [busy_by_group[g] / makespan if makespan > 0 else 0.0 for g in range(n_groups)]
    gantt = sorted((g, job, "backfill" if bf else "exec", s, e)
                   for g, job, _, s, e, bf, _ in spans if g is not None)
    for ev in events:
        if ev["action"] in ("load", "offload") and ev["end"] > ev["t"]:
            gantt.append((ev["group"], ev["job"], ev["action"], ev["t"], ev["end"]))
    gantt.sort(key=lambda r: (r[0], r[3], r[4], r[2], r[1]))
    return SimReport(policy, jobs, makespan, util,
                     delay_cdf(m.normalized_delay for m in jobs.values()), list(events), gantt)


def check_schedule(events: Sequence[dict], *, n_groups: int, staleness_steps: int) -> list[str]:
    """Safety violations found in an event log (empty when the log is sound).

    Checks per-group exclusivity (setup and execution never overlap), cluster
    occupancy, per-job serial execution of training phases and rollouts, and
    the rollout lead bound.
    """
    problems = []
    spans, _ = _exec_intervals(events)
    per_group = defaultdict(list)
    for g, job, req, s, e, _, _ in spans:
        if g is not None:
            per_group[g].append((s, e, req))
    for ev in events:
        if ev["action"] in ("load", "offload") and ev["end"] > ev["t"]:
            per_group[ev["group"]].append((ev["t"], ev["end"], f"{ev['action']}:{ev['job']}"))
    for g, items in per_group.items():
        if not 0 <= g < n_groups:
            problems.append(f"unknown group {g}")
        items.sort()
        for (s1, e1, r1), (s2, e2, r2) in zip(items, items[1:]):
            if s2 < e1 - EPS:
                problems.append(f"group {g}: {r1} and {r2} overlap at {s2}")
    cycle_of = {}
    for ev in events:
        if ev["action"] == "ready":
            cycle_of[ev["request"]] = ev.get("iteration", 0)
    by_job = defaultdict(lambda: {"on": [], "off": []})
    seen = set()
    for g, job, req, s, e, _, _ in spans:
        if (req, s) in seen:
            continue
        seen.add((req, s))
        by_job[job]["off" if g is None else "on"].append((s, e, req))
    for job, lanes in by_job.items():
        for lane, items in lanes.items():
            items.sort()
            for (s1, e1, r1), (s2, e2, r2) in zip(items, items[1:]):
                if s2 < e1 - EPS:
                    problems.append(f"{job}: {lane} phases {r1} and {r2} overlap")
        for s, e, r in lanes["off"]:
            for s2, e2, r2 in lanes["on"]:
                if s < e2 - EPS and s2 < e - EPS:
                    lead = cycle_of.get(r, 0) - cycle_of.get(r2, 0)
                    if staleness_steps == 0 or lead > staleness_steps:
                        problems.append(f"{job}: rollout {r} overlaps training {r2} (lead {lead})")
    return problems
