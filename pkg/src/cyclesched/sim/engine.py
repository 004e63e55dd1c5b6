"""Deterministic discrete-event simulation of periodic jobs on node groups.

Each job cycle is a sequence of phases: the job's segments run on its node
groups ("on" phases) and the gaps between them run elsewhere ("off" phases,
i.e. rollout).  No phase starts before its nominal time in the placed
schedule.  Training phases run serially; a rollout may run ahead of training
by at most ``staleness_steps`` iterations.

Node groups execute one request at a time, ordered by switch-aware response
ratio, and pay a setup gap whenever the resident job changes.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field, replace
from typing import Callable

from ..errors import ConfigInfeasible, NoCapacity
from ..placement import AdmissionSLO, ClusterState, PlacementDecision, place_job, repack
from ..runtime import ResourceView, SchedRequest, replan_with_hrrs
from ..trace import TRAINING_PHASES, TraceEntry, WorkloadTrace
from .config import Policy, SimConfig
from .metrics import SimReport, bubble_ratio, compute_metrics

EPS = 1e-9

# same-time events run in this order: completions free resources first,
# then arrivals of work, then admission, then group dispatch
_FINISH, _RELEASE, _ARRIVE, _ADMIT, _DISPATCH = range(5)


@dataclass
class PhaseRun:
    index: int
    cycle: int
    kind: str  # "on" | "off"
    offset: float
    duration: float
    name: str
    ready: float | None = None
    announced: bool = False
    released: bool = False
    done: bool = False
    version: int = 0


def request_id(job_id: str, cycle: int, index: int) -> str:
    return f"{job_id}/c{cycle}p{index}"


@dataclass
class Work:
    """An on-phase request travelling through the group runtime."""

    req: SchedRequest
    job: "JobRun"
    phase: PhaseRun
    groups: tuple[int, ...]
    actual: float
    commit_seq: int | None = None
    holders: set = field(default_factory=set)
    finish_version: int = 0
    end: float = 0.0


@dataclass
class GroupState:
    gid: int
    resident: str | None = None
    state: str = "idle"  # idle | setup | exec | hold
    current: Work | None = None
    pending: list[Work] = field(default_factory=list)
    dispatch_queued: bool = False


class JobRun:
    def __init__(self, entry: TraceEntry):
        self.entry = entry
        p = entry.profile
        self.id = p.job_id
        self.period = p.period
        self.k = p.node_demand
        template = []
        cursor = 0.0
        for j, (a, d) in enumerate(p.segments):
            if a > cursor + EPS:
                template.append(("off", cursor, a - cursor, "rollout"))
            template.append(("on", a, d, f"seg{j}"))
            cursor = a + d
        if cursor < p.period - EPS:
            template.append(("off", cursor, p.period - cursor, "rollout"))
        self.per_cycle = len(template)
        self.on_per_cycle = sum(1 for t in template if t[0] == "on")
        self.off_per_cycle = self.per_cycle - self.on_per_cycle
        self.phases = [
            PhaseRun(c * self.per_cycle + i, c, kind, off, dur, name)
            for c in range(entry.cycles)
            for i, (kind, off, dur, name) in enumerate(template)
        ]
        self.on_idx = [ph.index for ph in self.phases if ph.kind == "on"]
        self.off_idx = [ph.index for ph in self.phases if ph.kind == "off"]
        self.next_on = 0  # position in on_idx of the next unreleased on-phase
        self.next_off = 0
        self.on_done = 0
        self.state = "pending"  # pending | queued | backfill | admitted | done
        self.groups: tuple[int, ...] = ()
        # nominal schedule: cycles >= c0 start at origin + (c - c0) * T
        self.mapping = [(0, entry.arrival)]
        self.decision: PlacementDecision | None = None
        self.cold = False

    def nominal(self, ph: PhaseRun) -> float:
        base, origin = 0, self.entry.arrival
        for c0, o in self.mapping:
            if ph.cycle >= c0:
                base, origin = c0, o
        return origin + (ph.cycle - base) * self.period + ph.offset

    def rid(self, ph: PhaseRun) -> str:
        return request_id(self.id, ph.cycle, ph.index)

    def next_unstarted_cycle(self) -> int:
        issued = [ph.cycle for ph in self.phases if ph.released]
        return max(issued) + 1 if issued else 0

    def completed_cycles(self) -> int:
        return next((ph.cycle for ph in self.phases if not ph.done), self.entry.cycles)

    @property
    def finished(self) -> bool:
        return all(ph.done for ph in self.phases)

    def eligible(self, ph: PhaseRun, staleness: int) -> bool:
        if ph.index == 0:
            return True
        prev = self.phases[ph.index - 1]
        if staleness == 0:
            return prev.done
        if ph.kind == "on":
            # training consumes the preceding rollout and runs after the previous update
            return prev.done and self.on_done == self.on_idx.index(ph.index)
        pos = self.off_idx.index(ph.index)
        if pos > 0 and not self.phases[self.off_idx[pos - 1]].done:
            return False
        return self.on_done >= (ph.cycle - staleness) * self.on_per_cycle

    def candidates(self) -> list[PhaseRun]:
        out = []
        if self.next_on < len(self.on_idx):
            out.append(self.phases[self.on_idx[self.next_on]])
        if self.next_off < len(self.off_idx):
            out.append(self.phases[self.off_idx[self.next_off]])
        return sorted(out, key=lambda ph: ph.index)

    def mark_done(self, ph: PhaseRun) -> None:
        ph.done = True
        if ph.kind == "on":
            self.on_done += 1


class EventLoop:
    """Heap-ordered event loop with a structured event log."""

    def __init__(self, trace: WorkloadTrace, cfg: SimConfig):
        self.cfg = cfg
        self.trace = trace
        for e in trace.jobs:
            if e.profile.node_demand > cfg.total_node_groups:
                raise ConfigInfeasible(
                    f"{e.job_id} needs {e.profile.node_demand} groups, cluster has {cfg.total_node_groups}")
        self.setup = cfg.setup_model({e.job_id: e.profile.state_bytes for e in trace.jobs})
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.log: list[dict] = []

    def push(self, t: float, prio: int, fn: Callable, *args) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, prio, self.seq, fn, args))

    def emit(self, action: str, job: str | None = None, group=None, request=None, **extra) -> None:
        rec = {"t": round(self.now, 6), "action": action, "job": job, "group": group,
               "request": request}
        rec.update(extra)
        self.log.append(rec)

    def emit_setup(self, action: str, job: str, group: int, start: float, seconds: float) -> None:
        self.log.append({"t": round(start, 6), "action": action, "job": job, "group": group,
                         "request": None, "end": round(start + seconds, 6)})

    def loop(self) -> None:
        while self.heap:
            t, _, _, fn, args = heapq.heappop(self.heap)
            self.now = t
            fn(*args)

    def switch_parts(self, resident, incoming) -> tuple[float, float]:
        """(offload, load) seconds on the critical path; ``incoming=None`` empties the group."""
        if resident == incoming:
            return 0.0, 0.0
        cost = self.setup(resident, incoming or resident) if callable(self.setup) else self.setup
        t_off = 0.0 if resident is None or self.cfg.offload_off_critical_path else cost.t_offload
        return t_off, (0.0 if incoming is None else cost.t_load)

    def jittered(self, job_id: str, ph: PhaseRun) -> float:
        if not self.cfg.jitter:
            return ph.duration
        rng = random.Random(f"{self.cfg.seed}:{job_id}:{ph.index}")
        return ph.duration * (1.0 + rng.uniform(-self.cfg.jitter, self.cfg.jitter))


class Simulator(EventLoop):
    """Admission, placement and per-group runtime for the non-backfill policies."""

    def __init__(self, trace: WorkloadTrace, cfg: SimConfig):
        super().__init__(trace, cfg)
        self.jobs = {e.job_id: JobRun(e) for e in trace.jobs}
        self.cluster = ClusterState(cfg.total_node_groups, cfg.horizon, cfg.slot_len)
        self.groups = [GroupState(g) for g in range(cfg.total_node_groups)]
        self.queue: list[JobRun] = []
        self.commit_counter = 0

    def run(self) -> list[dict]:
        for job in sorted(self.jobs.values(), key=lambda j: (j.entry.arrival, j.id)):
            self.push(job.entry.arrival, _ARRIVE, self.on_arrive, job)
        self.loop()
        return self.log

    def setup_seconds(self, job: JobRun) -> float:
        """Cost of one switch between this job and a job of the same size."""
        if callable(self.setup):
            tm = self.cfg.transfer
            hop = job.entry.profile.state_bytes / tm.bw_device_host + tm.fixed_latency
            return hop if self.cfg.offload_off_critical_path else 2 * hop
        off = 0.0 if self.cfg.offload_off_critical_path else self.setup.t_offload
        return off + self.setup.t_load

    # -- admission --------------------------------------------------------
    def on_arrive(self, job: JobRun) -> None:
        self.emit("arrive", job.id)
        job.state = "queued"
        self.queue.append(job)
        self.mark_ready(job)
        self.push(self.now, _ADMIT, self.try_admissions)

    def job_priority(self, job: JobRun):
        service = job.entry.cycles * job.period
        return (-(1.0 + (self.now - job.entry.arrival) / service), job.entry.arrival, job.id)

    def try_admissions(self) -> None:
        progressed = True
        while progressed:
            progressed = False
            for job in sorted(self.queue, key=self.job_priority):
                if self.admit(job):
                    progressed = True
                    break

    def admit(self, job: JobRun) -> bool:
        cfg = self.cfg
        cycles = job.entry.cycles
        setup_s = self.setup_seconds(job)
        slo = AdmissionSLO(cfg.duty_ratio_bound, cfg.setup_slots(setup_s))
        try:
            if cfg.policy is Policy.ISOLATED:
                dec = place_job(job.entry.profile, self.cluster, cfg.placement, "cold", now=self.now,
                                cycles=cycles, profiling_duration=cycles * job.period)
            elif cfg.cold_start_cycles and cycles > cfg.cold_start_cycles:
                dec = place_job(job.entry.profile, self.cluster, cfg.placement, "cold", now=self.now,
                                cycles=cfg.cold_start_cycles,
                                profiling_duration=cfg.cold_start_cycles * job.period)
                job.cold = True
            else:
                order = "pack" if cfg.policy is Policy.PACK else "spread"
                guard = 0 if order == "pack" else cfg.setup_slots(setup_s)
                dec = place_job(job.entry.profile, self.cluster, cfg.placement, "warm", now=self.now,
                                cycles=cycles, order=order, guard=guard, slo=slo)
        except NoCapacity:
            return False
        self.queue.remove(job)
        if cfg.policy is not Policy.ISOLATED:
            self.schedule_expiry(job, dec)
        self.emit("admit", job.id, group=list(dec.node_group_ids), delta=dec.delta, mode=dec.mode)
        self.bind(job, dec, 0)
        return True

    def bind(self, job: JobRun, dec: PlacementDecision, from_cycle: int) -> None:
        job.state = "admitted"
        job.decision = dec
        job.groups = dec.node_group_ids
        # state is staged onto an empty, idle group as part of the launch
        for g in job.groups:
            grp = self.groups[g]
            if grp.resident is None and grp.state == "idle" and not grp.pending:
                grp.resident = job.id
                self.emit("stage", job.id, group=g)
        job.mapping = [m for m in job.mapping if m[0] < from_cycle]
        job.mapping.append((from_cycle, dec.start_slot * self.cfg.slot_len))
        self.mark_ready(job)
        self.release_ready(job)

    def schedule_expiry(self, job: JobRun, dec: PlacementDecision) -> None:
        self.push(dec.end_slot * self.cfg.slot_len, _FINISH, self.expire, job, dec)

    def expire(self, job: JobRun, dec: PlacementDecision) -> None:
        """Shared reservations end at their planned end, even if the job runs late."""
        placed = self.cluster.placed.get(job.id)
        if placed is not None and placed.decision is dec:
            self.cluster.release(job.id)
            self.emit("expire", job.id)
            self.try_admissions()

    # -- phase progression ------------------------------------------------
    def mark_ready(self, job: JobRun) -> None:
        for ph in job.candidates():
            if ph.ready is None and job.eligible(ph, self.cfg.staleness_steps):
                ph.ready = max(self.now, job.nominal(ph))
                ph.version += 1
                self.push(ph.ready, _RELEASE, self.on_ready, job, ph, ph.version)

    def on_ready(self, job: JobRun, ph: PhaseRun, version: int) -> None:
        if version != ph.version:
            return
        ph.announced = True
        self.emit("ready", job.id, request=job.rid(ph), iteration=ph.cycle)
        self.release_ready(job)

    def release_ready(self, job: JobRun) -> None:
        if job.state != "admitted":
            return
        for ph in job.candidates():
            if not ph.announced or ph.released:
                continue
            ph.version += 1
            self.push(max(self.now, job.nominal(ph)), _RELEASE, self.release, job, ph, ph.version)

    def release(self, job: JobRun, ph: PhaseRun, version: int) -> None:
        if ph.released or version != ph.version or job.state != "admitted":
            return
        ph.released = True
        rid = job.rid(ph)
        if ph.kind == "off":
            job.next_off += 1
            self.emit("rollout_start", job.id, request=rid, iteration=ph.cycle)
            self.push(self.now + self.jittered(job.id, ph), _FINISH, self.rollout_done, job, ph)
        else:
            job.next_on += 1
            req = SchedRequest(rid, job.id, ph.ready, ph.duration, kind=ph.name)
            self.submit(Work(req, job, ph, job.groups, self.jittered(job.id, ph)))
        self.mark_ready(job)

    def rollout_done(self, job: JobRun, ph: PhaseRun) -> None:
        self.emit("rollout_finish", job.id, request=job.rid(ph), iteration=ph.cycle)
        self.phase_done(job, ph)

    def phase_done(self, job: JobRun, ph: PhaseRun) -> None:
        job.mark_done(ph)
        if job.finished:
            self.complete(job)
            return
        if job.cold and ph.index == self.cfg.cold_start_cycles * job.per_cycle - 1:
            self.try_repack(job)
        self.mark_ready(job)
        self.release_ready(job)

    def try_repack(self, job: JobRun) -> None:
        from_cycle = job.next_unstarted_cycle()
        cycles = job.entry.cycles - from_cycle
        setup_s = self.setup_seconds(job)
        kw = dict(now=self.now, cycles=cycles, order="pack" if self.cfg.policy is Policy.PACK else "spread",
                  guard=self.cfg.setup_slots(setup_s),
                  slo=AdmissionSLO(self.cfg.duty_ratio_bound, self.cfg.setup_slots(setup_s)))
        try:
            if job.id in self.cluster.placed:
                dec = repack(self.cluster, job.entry.profile, self.cfg.placement, **kw)
            else:  # the cold reservation already ran out
                dec = place_job(job.entry.profile, self.cluster, self.cfg.placement, "warm", **kw)
        except NoCapacity:
            return
        job.cold = False
        self.emit("repack", job.id, group=list(dec.node_group_ids), delta=dec.delta)
        self.bind(job, dec, from_cycle)
        self.schedule_expiry(job, dec)

    def complete(self, job: JobRun) -> None:
        job.state = "done"
        # dedicated reservations end with the job
        freed = self.cfg.policy is Policy.ISOLATED and job.id in self.cluster.placed
        if freed:
            self.cluster.release(job.id)
        # a finished job's state is discarded, not offloaded
        for grp in self.groups:
            if grp.resident == job.id and grp.state == "idle":
                grp.resident = None
                self.emit("discard", job.id, group=grp.gid)
        self.emit("complete", job.id)
        if freed:
            self.push(self.now, _ADMIT, self.try_admissions)

    # -- group runtime ----------------------------------------------------
    def submit(self, w: Work) -> None:
        for g in w.groups:
            self.emit("submit", w.job.id, group=g, request=w.req.request_id, iteration=w.phase.cycle)
            grp = self.groups[g]
            grp.pending.append(w)
            if self.cfg.preemption and len(w.groups) == 1 and grp.state == "exec":
                self.maybe_preempt(grp)
            self.queue_dispatch(grp)

    def queue_dispatch(self, grp: GroupState) -> None:
        if not grp.dispatch_queued:
            grp.dispatch_queued = True
            self.push(self.now, _DISPATCH, self.dispatch, grp)

    def order_pending(self, grp: GroupState, running: SchedRequest | None = None) -> ResourceView:
        reqs = [w.req for w in grp.pending]
        if running is None:
            head, rest = reqs[0], reqs[1:]
        else:
            head, rest = reqs[-1], reqs[:-1]
        view = ResourceView(self.now, running, tuple((r, self.now, self.now) for r in rest), grp.resident)
        return replan_with_hrrs(head, view, self.setup, mode="physical")

    def maybe_preempt(self, grp: GroupState) -> None:
        cur = grp.current
        if cur is None or len(cur.groups) > 1:
            return
        remaining = cur.end - self.now
        if remaining <= EPS:
            return
        est = max(min(cur.req.exec_estimate, remaining), EPS)
        running = replace(cur.req, exec_estimate=max(cur.req.exec_estimate, est), remaining_time=est)
        view = self.order_pending(grp, running)
        if view.stopped != cur.req.request_id:
            return
        # stop the running request; it resumes later with its remaining time
        cur.finish_version += 1
        self.emit("stop", cur.job.id, group=grp.gid, request=cur.req.request_id, iteration=cur.phase.cycle)
        cur.actual = remaining
        cur.req = replace(cur.req, exec_estimate=est, remaining_time=est)
        grp.current, grp.state = None, "idle"
        grp.pending.insert(0, cur)

    def dispatch(self, grp: GroupState) -> None:
        grp.dispatch_queued = False
        if grp.state != "idle" or not grp.pending:
            return
        committed = [w for w in grp.pending if w.commit_seq is not None]
        if committed:
            w = min(committed, key=lambda w: w.commit_seq)
        else:
            first = self.order_pending(grp).scheduled[0][0]
            w = next(w for w in grp.pending if w.req.request_id == first.request_id)
        grp.pending.remove(w)
        if len(w.groups) > 1 and w.commit_seq is None:
            self.commit_counter += 1
            w.commit_seq = self.commit_counter
        grp.current = w
        ready_at = self.begin_setup(grp, w.job.id)
        grp.state = "setup" if ready_at > self.now + EPS else "hold"
        self.push(ready_at, _FINISH, self.setup_done, grp, w)

    def begin_setup(self, grp: GroupState, incoming: str) -> float:
        t_off, t_load = self.switch_parts(grp.resident, incoming)
        t = self.now
        if grp.resident is not None and grp.resident != incoming:
            self.emit_setup("offload", grp.resident, grp.gid, t, t_off)
            t += t_off
        if grp.resident != incoming:
            self.emit_setup("load", incoming, grp.gid, t, t_load)
            t += t_load
        grp.resident = incoming
        return t

    def setup_done(self, grp: GroupState, w: Work) -> None:
        grp.state = "hold"
        w.holders.add(grp.gid)
        if len(w.holders) < len(w.groups):
            return
        w.end = self.now + w.actual
        for g in w.groups:
            self.groups[g].state = "exec"
            self.emit("start", w.job.id, group=g, request=w.req.request_id, iteration=w.phase.cycle)
        w.holders = set()
        self.push(w.end, _FINISH, self.exec_done, w, w.finish_version)

    def exec_done(self, w: Work, version: int) -> None:
        if version != w.finish_version:
            return
        for g in w.groups:
            gs = self.groups[g]
            self.emit("finish", w.job.id, group=g, request=w.req.request_id, iteration=w.phase.cycle)
            gs.state, gs.current = "idle", None
            self.queue_dispatch(gs)
        self.phase_done(w.job, w.phase)


def simulate(trace: WorkloadTrace, cfg: SimConfig) -> list[dict]:
    """Event log of running ``trace`` under ``cfg``."""
    if cfg.policy is Policy.SPREAD_BACKFILL:
        from .backfill import BackfillSimulator
        return BackfillSimulator(trace, cfg).run()
    return Simulator(trace, cfg).run()


def run_simulation(trace: WorkloadTrace, cfg: SimConfig) -> SimReport:
    log = simulate(trace, cfg)
    report = compute_metrics(log, n_groups=cfg.total_node_groups, duty_ratio_bound=cfg.duty_ratio_bound,
                             policy=cfg.policy.value)
    for e in trace.jobs:
        p = e.profile
        train = [v for k, v in p.phase_costs.items() if k in TRAINING_PHASES]
        report.jobs[e.job_id].bubble_ratio = bubble_ratio(p.period, train if train else [p.active_time])
    return report
