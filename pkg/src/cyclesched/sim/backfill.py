"""Spread placement plus backfill into the residual idle windows of its plan.

The reserved plan is the schedule the spread policy produces for the same
trace.  Every admitted job replays its planned executions at their planned
times; nothing is ever moved.  Queued single-group jobs meanwhile run their
training phases in windows where a node group is idle in the plan, paying
the setup to switch in and to put the group back as it was.  Cycles a job
completes this way are dropped from the tail of its planned run, so a job
can only finish earlier than under plain spread placement.
"""

from __future__ import annotations

import bisect
import math
import re
from collections import defaultdict
from dataclasses import dataclass, replace

from ..trace import WorkloadTrace
from .config import Policy, SimConfig
from .engine import EPS, EventLoop, GroupState, JobRun, PhaseRun, Simulator, request_id

# same-time order: group hand-offs, replayed plan records, arrivals,
# admissions, planned setups, backfill marking, completions, then new
# backfill windows
_GROUP, _REPLAY, _ARRIVE, _ADMIT, _BLOCK, _MARK, _COMPLETE, _FILL = range(8)

_REQ = re.compile(r"^(?P<job>.*)/c(?P<cycle>\d+)p(?P<index>\d+)$")
_REPLAYED = {"ready", "submit", "start", "finish", "stop", "rollout_start", "rollout_finish", "repack",
             "expire"}


def parse_request(rid: str) -> tuple[str, int, int]:
    m = _REQ.match(rid)
    return m["job"], int(m["cycle"]), int(m["index"])


@dataclass
class Block:
    """One planned execution span on a group, with the setup in front of it."""

    job: str
    group: int
    t0: float  # setup start (equals ``start`` when no setup was needed)
    start: float
    end: float
    cycle: int


@dataclass
class Episode:
    job: JobRun
    phase: PhaseRun
    group: int
    prev: str | None
    actual: float
    end: float = 0.0  # including putting the group back
    cancel: bool = False
    version: int = 0


class Plan:
    """The spread schedule, indexed for replay."""

    def __init__(self, log: list[dict]):
        self.admit: dict[str, tuple[int, dict]] = {}
        self.stage: dict[str, list[tuple[float, int]]] = defaultdict(list)
        self.records: dict[str, list[dict]] = defaultdict(list)
        self.blocks: dict[str, list[Block]] = defaultdict(list)
        pending_setup: dict[int, list[dict]] = defaultdict(list)
        open_spans: dict[tuple, Block] = {}
        for pos, e in enumerate(log):
            act, job, g = e["action"], e["job"], e["group"]
            if act == "admit":
                self.admit[job] = (pos, e)
            elif act == "stage":
                self.stage[job].append((e["t"], g))
            elif act in ("load", "offload"):
                pending_setup[g].append(e)
            if act in _REPLAYED and job in self.admit:
                self.records[job].append(e)
            if g is None or e["request"] is None:
                continue
            if act == "start":
                setups = pending_setup.pop(g, [])
                t0 = min((s["t"] for s in setups), default=e["t"])
                blk = Block(job, g, t0, e["t"], math.inf, parse_request(e["request"])[1])
                open_spans[(g, e["request"])] = blk
                self.blocks[job].append(blk)
            elif act in ("finish", "stop"):
                open_spans.pop((g, e["request"])).end = e["t"]


class BackfillSimulator(EventLoop):
    def __init__(self, trace: WorkloadTrace, cfg: SimConfig):
        super().__init__(trace, cfg)
        self.plan = Plan(Simulator(trace, replace(cfg, policy=Policy.SPREAD)).run())
        self.jobs = {e.job_id: JobRun(e) for e in trace.jobs}
        self.groups = [GroupState(g) for g in range(cfg.total_node_groups)]
        self.busy_until = [0.0] * cfg.total_node_groups
        self.episodes: dict[int, Episode] = {}
        self.pool: list[tuple[JobRun, PhaseRun]] = []
        self.block_starts: list[list[float]] = [[] for _ in self.groups]
        self.admission_points: list[float] = sorted(e.arrival for e in trace.jobs)
        self.fill_queued = False
        self.completes_at: dict[str, float] = {}

    def run(self) -> list[dict]:
        for job in sorted(self.jobs.values(), key=lambda j: (j.entry.arrival, j.id)):
            self.push(job.entry.arrival, _ARRIVE, self.on_arrive, job)
            self.push(job.entry.arrival, _MARK, self.mark_backfill, job)
        for job_id, (_, rec) in sorted(self.plan.admit.items(), key=lambda kv: kv[1][0]):
            self.push(rec["t"], _ADMIT, self.admit, self.jobs[job_id], rec)
        self.loop()
        return self.log

    # -- queued jobs ------------------------------------------------------
    def on_arrive(self, job: JobRun) -> None:
        self.emit("arrive", job.id)
        job.state = "queued"
        ph = job.phases[0]
        ph.ready, ph.announced = self.now, True
        self.emit("ready", job.id, request=job.rid(ph), iteration=ph.cycle)
        self.queue_fill()

    def mark_backfill(self, job: JobRun) -> None:
        if job.state == "queued" and job.k == 1:
            job.state = "backfill"
            self.emit("backfill", job.id)
            self.advance(job)

    def advance(self, job: JobRun) -> None:
        """Release every phase of a backfilling job that may start now."""
        if job.state != "backfill":
            return
        for ph in job.candidates():
            if ph.released or not job.eligible(ph, self.cfg.staleness_steps):
                continue
            if not ph.announced:
                ph.ready, ph.announced = self.now, True
                self.emit("ready", job.id, request=job.rid(ph), iteration=ph.cycle)
            ph.released = True
            if ph.kind == "off":
                job.next_off += 1
                self.emit("rollout_start", job.id, request=job.rid(ph), iteration=ph.cycle)
                self.push(self.now + self.jittered(job.id, ph), _GROUP, self.rollout_done, job, ph, ph.version)
            else:
                job.next_on += 1
                self.emit("submit", job.id, request=job.rid(ph), iteration=ph.cycle, backfill=True)
                self.pool.append((job, ph))
                self.queue_fill()

    def rollout_done(self, job: JobRun, ph: PhaseRun, version: int) -> None:
        if version != ph.version:
            return
        self.emit("rollout_finish", job.id, request=job.rid(ph), iteration=ph.cycle)
        self.phase_done(job, ph)

    def phase_done(self, job: JobRun, ph: PhaseRun) -> None:
        job.mark_done(ph)
        if job.finished:
            self.complete(job)
        else:
            self.advance(job)

    def complete(self, job: JobRun) -> None:
        job.state = "done"
        # a finished job's state is discarded, not offloaded
        for grp in self.groups:
            if grp.resident == job.id and self.idle(grp.gid):
                grp.resident = None
                self.emit("discard", job.id, group=grp.gid)
        self.emit("complete", job.id)

    # -- admission: switch to the planned run -----------------------------
    def admit(self, job: JobRun, rec: dict) -> None:
        extra = {k: v for k, v in rec.items() if k not in ("t", "action", "job", "group", "request")}
        done = job.completed_cycles() if job.state in ("backfill", "done") else 0
        if job.state == "backfill":
            self.rollback(job, done)
        for e in self.plan.records[job.id]:
            if e["action"] == "expire":
                bisect.insort(self.admission_points, e["t"])
            elif e["action"] == "repack":
                bisect.insort(self.admission_points, e["t"])
        n = job.entry.cycles
        if done == n:
            self.emit("admit", job.id, group=rec["group"], finished=True, **extra)
            for e in self.plan.records[job.id]:
                if e["request"] is None:
                    self.push(e["t"], _REPLAY, self.replay, dict(e))
        else:
            was_backfill = job.state == "backfill"
            job.state = "admitted"
            self.emit("admit", job.id, group=rec["group"], **extra)
            for t, g in self.plan.stage.get(job.id, ()):
                self.push(t, _ADMIT, self.stage, job, g)
            if was_backfill:
                ph = job.phases[done * job.per_cycle]
                self.emit("ready", job.id, request=job.rid(ph), iteration=ph.cycle)
            last = self.now
            for e in self.plan.records[job.id]:
                out = self.relabel(job, e, done)
                if out is None:
                    continue
                if out["action"] == "ready" and was_backfill and out["request"] == job.rid(
                        job.phases[done * job.per_cycle]):
                    continue
                if out["request"] is not None:
                    last = max(last, out["t"])
                self.push(out["t"], _REPLAY, self.replay, out)
            self.completes_at[job.id] = last
            self.push(last, _COMPLETE, self.complete, job)
        for blk in self.plan.blocks[job.id]:
            bisect.insort(self.block_starts[blk.group], blk.t0)
            keep = done < n and blk.cycle < n - done
            self.push(blk.t0, _BLOCK, self.block_setup if keep else self.block_dropped, blk)
            self.push(blk.end, _FILL, self.queue_fill)

    def stage(self, job: JobRun, g: int) -> None:
        if job.state == "done" or self.completes_at.get(job.id, math.inf) <= self.now + EPS:
            return
        self.settle(g)
        grp = self.groups[g]
        if grp.resident is not None or not self.idle(g):
            raise RuntimeError(f"plan replay: group {g} not empty when staging {job.id}")
        grp.resident = job.id
        self.emit("stage", job.id, group=g)

    def relabel(self, job: JobRun, e: dict, done: int) -> dict | None:
        out = dict(e)
        if e["request"] is None:
            return out
        _, cycle, index = parse_request(e["request"])
        if cycle >= job.entry.cycles - done:
            return None
        out["request"] = request_id(job.id, cycle + done, index + done * job.per_cycle)
        out["iteration"] = cycle + done
        return out

    def replay(self, rec: dict) -> None:
        self.log.append(rec)

    def rollback(self, job: JobRun, done: int) -> None:
        """Drop the partially executed cycle of a backfilling job."""
        self.pool = [(j, ph) for j, ph in self.pool if j is not job]
        running = set()
        for g, ep in list(self.episodes.items()):
            if ep.job is not job or ep.cancel:
                continue
            ep.cancel = True
            if self.groups[g].state == "exec":
                running.add(ep.phase.index)
                ep.version += 1
                self.emit("abort", job.id, group=g, request=job.rid(ep.phase), iteration=ep.phase.cycle)
                self.restore(g, ep)
        for ph in job.phases[done * job.per_cycle:]:
            if ph.announced and not ph.done and ph.index not in running:
                self.emit("abort", job.id, request=job.rid(ph), iteration=ph.cycle)
            ph.ready, ph.announced, ph.released, ph.done = None, False, False, False
            ph.version += 1

    # -- planned group usage ----------------------------------------------
    def settle(self, g: int) -> None:
        """Discard the state of a job completing at this instant, as the plan does."""
        grp = self.groups[g]
        if grp.resident is not None and self.completes_at.get(grp.resident, math.inf) <= self.now + EPS:
            self.emit("discard", grp.resident, group=g)
            grp.resident = None

    def block_setup(self, blk: Block) -> None:
        self.settle(blk.group)
        grp = self.groups[blk.group]
        t_off, t_load = self.switch_parts(grp.resident, blk.job)
        start = blk.start - t_off - t_load
        if start < self.now - EPS or self.busy_until[blk.group] > start + EPS:
            raise RuntimeError(f"plan replay: setup for {blk.job} on group {blk.group} does not fit")
        if grp.resident is not None and grp.resident != blk.job:
            self.emit_setup("offload", grp.resident, blk.group, start, t_off)
        if grp.resident != blk.job:
            self.emit_setup("load", blk.job, blk.group, start + t_off, t_load)
        grp.resident = blk.job
        self.busy_until[blk.group] = blk.end

    def block_dropped(self, blk: Block) -> None:
        """A planned span of cycles already run by backfill: only clear the group."""
        self.settle(blk.group)
        grp = self.groups[blk.group]
        if grp.resident is None or grp.resident == blk.job:
            return
        if self.busy_until[blk.group] > self.now + EPS:
            raise RuntimeError(f"plan replay: group {blk.group} busy at a dropped span")
        t_off, _ = self.switch_parts(grp.resident, None)
        self.emit_setup("offload", grp.resident, blk.group, self.now, t_off)
        grp.resident = None
        self.busy_until[blk.group] = self.now + t_off

    def idle(self, g: int) -> bool:
        return g not in self.episodes and self.busy_until[g] <= self.now + EPS

    def deadline(self, g: int) -> float:
        """Latest time a backfill episode on ``g`` may hand the group back."""
        t = math.inf
        starts = self.block_starts[g]
        i = bisect.bisect_left(starts, self.now - EPS)
        if i < len(starts):
            t = starts[i]
        # a job admitted at the next admission point may be planned onto any group
        j = bisect.bisect_right(self.admission_points, self.now + EPS)
        if j < len(self.admission_points):
            t = min(t, self.admission_points[j])
        return t

    # -- backfill episodes ------------------------------------------------
    def queue_fill(self) -> None:
        if not self.fill_queued:
            self.fill_queued = True
            self.push(self.now, _FILL, self.fill)

    def fill(self) -> None:
        self.fill_queued = False
        if not self.pool:
            return
        for grp in self.groups:
            if not self.idle(grp.gid):
                continue
            limit = self.deadline(grp.gid)
            for job, ph in sorted(self.pool, key=lambda it: (it[1].ready, it[0].rid(it[1]))):
                if self.try_episode(grp, job, ph, limit):
                    break

    def try_episode(self, grp: GroupState, job: JobRun, ph: PhaseRun, limit: float) -> bool:
        prev = grp.resident
        actual = self.jittered(job.id, ph)
        t_in = sum(self.switch_parts(prev, job.id))
        t_out = sum(self.switch_parts(job.id, prev))
        end = self.now + t_in + actual + t_out
        if end > limit + EPS:
            return False
        self.pool.remove((job, ph))
        ep = Episode(job, ph, grp.gid, prev, actual, end)
        self.episodes[grp.gid] = ep
        t_off, t_load = self.switch_parts(prev, job.id)
        if prev is not None and prev != job.id:
            self.emit_setup("offload", prev, grp.gid, self.now, t_off)
        if prev != job.id:
            self.emit_setup("load", job.id, grp.gid, self.now + t_off, t_load)
        grp.resident, grp.state = job.id, "setup"
        self.push(self.now + t_in, _GROUP, self.episode_start, ep)
        return True

    def episode_start(self, ep: Episode) -> None:
        if ep.cancel:
            self.restore(ep.group, ep)
            return
        self.groups[ep.group].state = "exec"
        self.emit("start", ep.job.id, group=ep.group, request=ep.job.rid(ep.phase),
                  iteration=ep.phase.cycle, backfill=True)
        self.push(self.now + ep.actual, _GROUP, self.episode_done, ep, ep.version)

    def episode_done(self, ep: Episode, version: int) -> None:
        if version != ep.version:
            return
        self.emit("finish", ep.job.id, group=ep.group, request=ep.job.rid(ep.phase), iteration=ep.phase.cycle)
        self.restore(ep.group, ep)
        self.phase_done(ep.job, ep.phase)

    def restore(self, g: int, ep: Episode) -> None:
        """Hand the group back as the episode found it."""
        grp = self.groups[g]
        target = ep.prev
        if target is not None and self.jobs[target].state == "done":
            target = None  # its state would have been discarded meanwhile
        t_off, t_load = self.switch_parts(grp.resident, target)
        if grp.resident is not None and grp.resident != target:
            self.emit_setup("offload", grp.resident, g, self.now, t_off)
        if target is not None and grp.resident != target:
            self.emit_setup("load", target, g, self.now + t_off, t_load)
        grp.resident, grp.state = target, "setup"
        self.busy_until[g] = self.now + t_off + t_load
        self.push(self.busy_until[g], _GROUP, self.restored, g, ep)

    def restored(self, g: int, ep: Episode) -> None:
        if self.episodes.get(g) is ep:
            del self.episodes[g]
        grp = self.groups[g]
        grp.state = "idle"
        if grp.resident is not None and self.jobs[grp.resident].state == "done":
            self.emit("discard", grp.resident, group=g)
            grp.resident = None
        self.queue_fill()
