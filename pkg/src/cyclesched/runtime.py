"""Per-group runtime scheduling: switch-aware response-ratio priorities,
timeline replanning, context-switch injection, per-job operation queues and
the job lifecycle state machine."""

from __future__ import annotations

import enum
import math
import threading
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field, replace
from typing import Callable, Hashable, Union

from .errors import IllegalTransition, JobCompleted, UnknownJob

EPS = 1e-9


@dataclass(frozen=True)
class SetupCost:
    t_offload: float = 0.0
    t_load: float = 0.0

    def __post_init__(self):
        if self.t_offload < 0 or self.t_load < 0:
            raise ValueError("setup costs must be >= 0")

    @property
    def total(self) -> float:
        return self.t_offload + self.t_load


# A setup model is either a flat cost or a function (resident, incoming) -> SetupCost.
SetupModel = Union[SetupCost, Callable[[Hashable, Hashable], SetupCost]]


def switch_cost(setup: SetupModel, resident, incoming) -> float:
    """Seconds of setup a group needs before ``incoming`` can run."""
    if resident == incoming:
        return 0.0
    cost = setup(resident, incoming) if callable(setup) else setup
    if resident is None:
        return cost.t_load
    return cost.t_offload + cost.t_load


@dataclass(frozen=True)
class SchedRequest:
    request_id: str
    job_id: Hashable
    arrival_time: float
    exec_estimate: float
    remaining_time: float | None = None
    kind: str = ""
    target_wpg: Hashable = None

    def __post_init__(self):
        if not self.exec_estimate > 0:
            raise ValueError(f"{self.request_id}: exec estimate must be > 0")
        if self.remaining_time is None:
            object.__setattr__(self, "remaining_time", self.exec_estimate)
        if self.remaining_time < 0 or self.remaining_time > self.exec_estimate + EPS:
            raise ValueError(f"{self.request_id}: remaining time outside [0, E]")


@dataclass(frozen=True)
class ResourceView:
    """Timeline of one node group.

    ``scheduled`` lists ``(request, start, end)`` in execution order.  When a
    running request keeps executing it is the first entry; ``stopped`` names a
    running request that a replan preempted.
    """

    t_now: float = 0.0
    running: SchedRequest | None = None
    scheduled: tuple[tuple[SchedRequest, float, float], ...] = ()
    resident_job: Hashable = None
    stopped: str | None = None

    def pending(self) -> list[SchedRequest]:
        rid = self.running.request_id if self.running else None
        return [r for r, _, _ in self.scheduled if r.request_id != rid]

    def check(self) -> None:
        prev = self.t_now
        for r, s, e in self.scheduled:
            if s < prev - EPS or e < s - EPS:
                raise AssertionError(f"{r.request_id}: [{s}, {e}) breaks timeline order")
            prev = e


def effective_service_time(req: SchedRequest, resident_job, setup: SetupModel) -> float:
    return req.exec_estimate + switch_cost(setup, resident_job, req.job_id)


def hrrs_priority(req: SchedRequest, t_now: float, resident_job, setup: SetupModel) -> float:
    wait = t_now - req.arrival_time
    service = effective_service_time(req, resident_job, setup)
    if service <= 0:
        return math.inf
    return 1.0 + wait / service


def _strict(new: SchedRequest, view: ResourceView, setup: SetupCost) -> ResourceView:
    running = view.running
    omega = [new] + ([running] if running else []) + view.pending()
    t_now = view.t_now
    req_time = {}
    scores = []
    for r in omega:
        wait = t_now - r.arrival_time
        if running is not None and r.request_id == running.request_id:
            t_req = r.remaining_time
        else:
            t_req = r.exec_estimate + setup.t_load + setup.t_offload
        req_time[r.request_id] = t_req
        scores.append(math.inf if t_req <= 0 else (wait + t_req) / t_req)
    order = sorted(range(len(omega)), key=lambda i: -scores[i])
    cursor = t_now
    stopped = None
    out = []
    for i in order:
        r = omega[i]
        is_running = running is not None and r.request_id == running.request_id
        if not is_running and cursor == t_now:
            cursor += setup.t_offload + setup.t_load
            if running is not None:
                stopped = running.request_id
        out.append((r, cursor, cursor + req_time[r.request_id]))
        cursor += req_time[r.request_id]
    keep = running if running is not None and stopped is None else None
    return ResourceView(t_now, keep, tuple(out), view.resident_job, stopped)


def _physical(new: SchedRequest, view: ResourceView, setup: SetupModel) -> ResourceView:
    running = view.running
    omega = [new] + ([running] if running else []) + view.pending()
    t_now = view.t_now
    resident = view.resident_job
    run_id = running.request_id if running else None

    def key(r: SchedRequest):
        if r.request_id == run_id:
            service = r.remaining_time
        else:
            service = effective_service_time(r, resident, setup)
        score = math.inf if service <= 0 else 1.0 + (t_now - r.arrival_time) / service
        return (-score, r.job_id != resident, r.arrival_time, r.request_id)

    ordered = sorted(omega, key=key)
    cursor = t_now
    current = resident
    stopped = None
    out = []
    for pos, r in enumerate(ordered):
        if r.request_id == run_id:
            if pos > 0:
                stopped = run_id
            dur = r.remaining_time
        else:
            dur = r.exec_estimate
            if pos == 0 and running is not None:
                stopped = run_id
        cursor += switch_cost(setup, current, r.job_id)
        out.append((r, cursor, cursor + dur))
        cursor += dur
        current = r.job_id
    keep = running if running is not None and stopped is None else None
    return ResourceView(t_now, keep, tuple(out), resident, stopped)


def replan_with_hrrs(new: SchedRequest, view: ResourceView, setup: SetupModel,
                     mode: str = "physical") -> ResourceView:
    """Rebuild a group's timeline after ``new`` arrives.

    ``"strict-alg1"`` follows the textbook loop literally: every non-running
    request is scored with the full setup cost, and one setup gap is inserted
    before the first slot only.  ``"physical"`` scores with the actual switch
    cost relative to the resident job and inserts a gap before every change of
    job, so the timeline is physically consistent.
    """
    if mode == "strict-alg1":
        if callable(setup):
            raise ValueError("strict-alg1 mode needs a flat SetupCost")
        return _strict(new, view, setup)
    if mode == "physical":
        return _physical(new, view, setup)
    raise ValueError(f"unknown replanning mode {mode!r}")


# ---------------------------------------------------------------------------
# Context switching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContextOp:
    action: str
    job_id: Hashable
    group: Hashable


def transition_context(group, incoming_job, resident_map: dict) -> list[ContextOp]:
    """Operations to inject before ``incoming_job`` runs on ``group``."""
    resident = resident_map.get(group)
    if resident == incoming_job:
        return []
    ops = []
    if resident is not None:
        ops.append(ContextOp("offload", resident, group))
    ops.append(ContextOp("load", incoming_job, group))
    resident_map[group] = incoming_job
    return ops


# ---------------------------------------------------------------------------
# Job lifecycle
# ---------------------------------------------------------------------------

class Phase(enum.Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"


@dataclass(frozen=True)
class JobState:
    state: Phase = Phase.QUEUED
    holds_lock: bool = False
    prerequisites_done: bool = False


def fsm_advance(job: JobState, event: str) -> JobState:
    """Apply ``event`` (admit, lock_acquired, prereq_done, finished)."""
    if event == "admit":
        if job.state is not Phase.QUEUED:
            raise IllegalTransition(f"admit in state {job.state.value}")
        return job
    if event in ("lock_acquired", "prereq_done"):
        if job.state is not Phase.QUEUED:
            raise IllegalTransition(f"{event} in state {job.state.value}")
        if event == "lock_acquired":
            job = replace(job, holds_lock=True)
        else:
            job = replace(job, prerequisites_done=True)
        if job.holds_lock and job.prerequisites_done:
            job = replace(job, state=Phase.RUNNING)
        return job
    if event == "finished":
        if job.state is not Phase.RUNNING:
            raise IllegalTransition(f"finished in state {job.state.value}")
        return JobState(Phase.COMPLETED, holds_lock=False, prerequisites_done=True)
    raise IllegalTransition(f"unknown event {event!r}")


# ---------------------------------------------------------------------------
# Per-job operation queues
# ---------------------------------------------------------------------------

class OperationQueues:
    """Thread-safe per-job FIFO queues; ``submit`` never blocks on scheduling."""

    def __init__(self):
        self._lock = threading.Lock()
        self._queues: dict[Hashable, deque] = {}
        self._done: set = set()
        self._order: list = []

    def register(self, job_id) -> None:
        with self._lock:
            if job_id not in self._queues:
                self._queues[job_id] = deque()
                self._order.append(job_id)

    def complete(self, job_id) -> None:
        with self._lock:
            if job_id not in self._queues:
                raise UnknownJob(str(job_id))
            self._done.add(job_id)

    def submit(self, job_id, op) -> Future:
        fut: Future = Future()
        with self._lock:
            if job_id not in self._queues:
                raise UnknownJob(str(job_id))
            if job_id in self._done:
                raise JobCompleted(str(job_id))
            self._queues[job_id].append((op, fut))
        return fut

    def __len__(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def queue_length(self, job_id) -> int:
        with self._lock:
            return len(self._queues[job_id])

    def pop_next(self, job_id):
        with self._lock:
            q = self._queues.get(job_id)
            return q.popleft() if q else None

    def drain(self, execute: Callable = lambda op: op) -> int:
        """Run every queued op round-robin across jobs; returns ops executed."""
        count = 0
        while True:
            with self._lock:
                jobs = list(self._order)
            progressed = False
            for job_id in jobs:
                item = self.pop_next(job_id)
                if item is None:
                    continue
                op, fut = item
                if fut.set_running_or_notify_cancel():
                    try:
                        fut.set_result(execute(op))
                    except Exception as exc:  # surfaced through the handle
                        fut.set_exception(exc)
                count += 1
                progressed = True
            if not progressed:
                return count
