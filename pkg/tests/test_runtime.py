import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclesched.errors import IllegalTransition, JobCompleted, UnknownJob
from cyclesched.runtime import (ContextOp, JobState, OperationQueues, Phase, ResourceView, SchedRequest,
                                SetupCost, effective_service_time, fsm_advance, hrrs_priority,
                                replan_with_hrrs, switch_cost, transition_context)

SETUP = SetupCost(t_offload=5.0, t_load=19.0)


def req(rid, job, arrival=0.0, E=10.0, remaining=None):
    return SchedRequest(rid, job, arrival, E, remaining)


@pytest.mark.parametrize("resident,expected", [("a", 10.0), ("b", 34.0), (None, 29.0)])
def test_effective_service_time(resident, expected):
    assert effective_service_time(req("r", "a"), resident, SETUP) == expected


def test_hrrs_examples():
    r = req("r", "a", arrival=0.0)
    assert hrrs_priority(r, 0.0, "b", SETUP) == 1.0
    assert hrrs_priority(r, 34.0, "b", SETUP) == 2.0
    same = hrrs_priority(r, 20.0, "a", SETUP)
    other = hrrs_priority(r, 20.0, "b", SETUP)
    assert same == 3.0
    assert other == pytest.approx(1 + 20 / 34)
    assert same > other


@given(st.floats(0.01, 1e4), st.floats(0.01, 1e3), st.floats(0, 100), st.floats(0.01, 100))
def test_batching_bias(wait, E, off, load):
    setup = SetupCost(off, load)
    r = req("r", "a", arrival=0.0, E=E)
    assert hrrs_priority(r, wait, "a", setup) > hrrs_priority(r, wait, "b", setup)


def test_switch_cost_callable_model():
    model = lambda resident, incoming: SetupCost(1.0, 2.0 if incoming == "big" else 0.5)
    assert switch_cost(model, "x", "big") == 3.0
    assert switch_cost(model, None, "small") == 0.5
    assert switch_cost(model, "big", "big") == 0.0


def test_request_validation():
    with pytest.raises(ValueError):
        req("r", "a", E=0)
    with pytest.raises(ValueError):
        req("r", "a", E=5, remaining=6)
    with pytest.raises(ValueError):
        SetupCost(-1, 0)


# Line-by-line transcription of the published replanning loop, kept independent
# of the package implementation.
def reference_replan(r_new, running, scheduled, t_now, t_load, t_offload):
    omega = [r_new] + ([running] if running is not None else []) + list(scheduled)
    score, req_time = {}, {}
    for R in omega:
        t_wait = t_now - R.arrival_time
        if running is not None and R.request_id == running.request_id:
            t_req = R.remaining_time
        else:
            t_req = R.exec_estimate + t_load + t_offload
        req_time[R.request_id] = t_req
        score[R.request_id] = (t_wait + t_req) / t_req
    omega.sort(key=lambda R: score[R.request_id], reverse=True)
    t_cursor = t_now
    stopped = False
    view = []
    for R in omega:
        if (running is None or R.request_id != running.request_id) and t_cursor == t_now:
            t_cursor = t_cursor + t_offload + t_load
            stopped = running is not None
        t_start = t_cursor
        t_end = t_start + req_time[R.request_id]
        view.append((R.request_id, t_start, t_end))
        t_cursor = t_end
    return view, stopped


def random_stream(rng):
    t_now = rng.uniform(0, 500)
    jobs = ["a", "b", "c"]
    running = None
    if rng.random() < 0.7:
        E = rng.uniform(1, 60)
        running = req("run", rng.choice(jobs), rng.uniform(0, t_now), E, rng.uniform(0, E))
    pending = [req(f"p{i}", rng.choice(jobs), rng.uniform(0, t_now), rng.uniform(1, 60))
               for i in range(rng.randint(0, 6))]
    new = req("new", rng.choice(jobs), t_now, rng.uniform(1, 60))
    setup = SetupCost(rng.uniform(0, 20), rng.uniform(0, 30))
    return new, running, pending, t_now, setup


def view_of(running, pending, t_now, resident=None):
    sched = []
    cursor = t_now
    for r in ([running] if running else []) + pending:
        dur = r.remaining_time if r is running else r.exec_estimate
        sched.append((r, cursor, cursor + dur))
        cursor += dur
    return ResourceView(t_now, running, tuple(sched), resident)


def test_strict_mode_matches_reference():
    rng = random.Random(42)
    for _ in range(300):
        new, running, pending, t_now, setup = random_stream(rng)
        view = view_of(running, pending, t_now)
        out = replan_with_hrrs(new, view, setup, mode="strict-alg1")
        expect, stopped = reference_replan(new, running, pending, t_now, setup.t_load, setup.t_offload)
        got = [(r.request_id, s, e) for r, s, e in out.scheduled]
        assert [g[0] for g in got] == [x[0] for x in expect]
        for (_, s, e), (_, s2, e2) in zip(got, expect):
            assert s == pytest.approx(s2) and e == pytest.approx(e2)
        assert (out.stopped is not None) == stopped
        out.check()


def test_physical_idle_example():
    out = replan_with_hrrs(req("r", "a", 0.0, 10.0), ResourceView(0.0), SETUP)
    ((r, s, e),) = out.scheduled
    assert (s, e) == (19.0, 29.0)
    assert out.stopped is None


def test_physical_gaps_between_jobs():
    view = view_of(None, [req("p", "b", 0.0, 10.0)], 10.0, resident="a")
    out = replan_with_hrrs(req("n", "a", 10.0, 10.0), view, SETUP)
    # b waited 10 over 34, a waits 0: b first, then a pays its own switch back
    assert [(r.request_id, s, e) for r, s, e in out.scheduled] == [("p", 34.0, 44.0), ("n", 68.0, 78.0)]


def test_unknown_mode():
    with pytest.raises(ValueError):
        replan_with_hrrs(req("r", "a"), ResourceView(), SETUP, mode="fast")
    with pytest.raises(ValueError):
        replan_with_hrrs(req("r", "a"), ResourceView(), lambda a, b: SETUP, mode="strict-alg1")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9), st.sampled_from(["strict-alg1", "physical"]))
def test_replan_view_invariants(seed, mode):
    rng = random.Random(seed)
    new, running, pending, t_now, setup = random_stream(rng)
    resident = running.job_id if running else rng.choice([None, "a", "b"])
    out = replan_with_hrrs(new, view_of(running, pending, t_now, resident), setup, mode=mode)
    out.check()
    ids = [r.request_id for r, _, _ in out.scheduled]
    assert sorted(ids) == sorted([new.request_id] + ([running.request_id] if running else [])
                                 + [p.request_id for p in pending])
    if out.scheduled:
        assert out.scheduled[0][1] >= t_now


def test_long_wait_goes_first():
    """A request that has waited long enough outranks everything else."""
    pending = [req(f"p{i}", "a", 1000.0, 1.0) for i in range(4)] + [req("old", "b", 0.0, 50.0)]
    view = view_of(None, pending, 1000.0, resident="a")
    out = replan_with_hrrs(req("n", "a", 1000.0, 1.0), view, SETUP)
    assert out.scheduled[0][0].request_id == "old"


def test_physical_preempts_outranked_running():
    running = req("run", "a", 100.0, 50.0, remaining=40.0)
    view = view_of(running, [], 100.0, resident="a")
    out = replan_with_hrrs(req("n", "b", 0.0, 5.0), view, SETUP)
    assert out.stopped == "run"
    assert out.running is None
    assert out.scheduled[0][0].request_id == "n"


def test_transition_context():
    residents = {"g0": "A"}
    assert transition_context("g0", "A", residents) == []
    assert transition_context("g0", "B", residents) == [ContextOp("offload", "A", "g0"),
                                                        ContextOp("load", "B", "g0")]
    assert residents["g0"] == "B"
    assert transition_context("g1", "B", residents) == [ContextOp("load", "B", "g1")]


def test_fsm_gates():
    job = JobState()
    job = fsm_advance(job, "admit")
    job = fsm_advance(job, "lock_acquired")
    assert job.state is Phase.QUEUED
    job = fsm_advance(job, "prereq_done")
    assert job.state is Phase.RUNNING and job.holds_lock
    job = fsm_advance(job, "finished")
    assert job.state is Phase.COMPLETED and not job.holds_lock
    with pytest.raises(IllegalTransition):
        fsm_advance(job, "admit")


@given(st.lists(st.sampled_from(["admit", "lock_acquired", "prereq_done", "finished", "bogus"]),
                max_size=12))
def test_fsm_only_forward(events):
    order = [Phase.QUEUED, Phase.RUNNING, Phase.COMPLETED]
    job = JobState()
    for ev in events:
        before = job
        try:
            job = fsm_advance(job, ev)
        except IllegalTransition:
            assert job == before
            continue
        assert order.index(job.state) >= order.index(before.state)
        if job.state is Phase.RUNNING:
            assert job.holds_lock and job.prerequisites_done
        if job.state is Phase.COMPLETED:
            assert not job.holds_lock


def test_submit_errors():
    q = OperationQueues()
    with pytest.raises(UnknownJob):
        q.submit("ghost", "op")
    q.register("j")
    fut = q.submit("j", "op")
    assert not fut.done() and q.queue_length("j") == 1
    q.complete("j")
    with pytest.raises(JobCompleted):
        q.submit("j", "op2")


def test_queue_fifo_and_errors_surface():
    q = OperationQueues()
    q.register("j")
    futs = [q.submit("j", i) for i in range(5)]
    bad = q.submit("j", "boom")
    seen = []

    def run(op):
        if op == "boom":
            raise RuntimeError("boom")
        seen.append(op)
        return op * 2

    assert q.drain(run) == 6
    assert seen == list(range(5))
    assert [f.result() for f in futs] == [0, 2, 4, 6, 8]
    with pytest.raises(RuntimeError):
        bad.result()


def test_queue_liveness_many_producers():
    q = OperationQueues()
    for j in range(4):
        q.register(j)
    runs = []
    lock = threading.Lock()
    handles = []

    def produce(j):
        mine = [q.submit(j, (j, i)) for i in range(25)]
        with lock:
            handles.extend(mine)

    def execute(op):
        runs.append(op)
        return op

    threads = [threading.Thread(target=produce, args=(j,)) for j in range(4)]
    consumer_done = threading.Event()

    def consume():
        while not consumer_done.is_set() or len(q):
            q.drain(execute)

    consumer = threading.Thread(target=consume)
    consumer.start()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    consumer_done.set()
    consumer.join(timeout=10)
    assert len(handles) == 100
    assert all(h.result(timeout=5) == h.result() for h in handles)
    assert sorted(runs) == sorted((j, i) for j in range(4) for i in range(25))
    assert len(runs) == len(set(runs)) == 100
    for j in range(4):
        assert [op for op in runs if op[0] == j] == [(j, i) for i in range(25)]
    assert len(q) == 0
