import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclesched.errors import (InsufficientData, InvalidSpec, InvariantViolation, MalformedTrace,
                               NoPeriodicity)
from cyclesched.trace import (ExecutionEvent, JobProfile, TraceEntry, WorkloadSpec, WorkloadTrace,
                              dumps_trace, events_from_profile, loads_trace, parse_events, parse_trace,
                              profile_job, synthesize_workload, write_trace)


def record(**kw):
    rec = {"job_id": "j", "arrival_s": 0, "period_s": 100, "segments": [[0, 50]], "node_demand": 1,
           "state_bytes": 0, "phases": {}, "cycles": 1}
    rec.update(kw)
    return json.dumps(rec)


def test_one_job_file(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text(record() + "\n")
    trace = parse_trace(path)
    assert len(trace) == 1
    p = trace.jobs[0].profile
    assert (p.period, p.segments, p.node_demand) == (100.0, ((0.0, 50.0),), 1)


def test_segment_past_period_rejected():
    with pytest.raises(InvariantViolation):
        loads_trace(record(segments=[[60, 50]]))


@pytest.mark.parametrize("segments", [[[10, 20], [20, 5]], [[50, 10], [0, 10]], [[0, 0]], [[-1, 5]]])
def test_bad_segments(segments):
    with pytest.raises(InvariantViolation):
        loads_trace(record(segments=segments))


@pytest.mark.parametrize("line,idx", [
    ("{not json", 0),
    (record(period_s="x"), 0),
    (record(segments=[[1, 2, 3]]), 0),
    (record(job_id=""), 0),
    ("[]", 0),
])
def test_malformed_records_name_their_index(line, idx):
    with pytest.raises(MalformedTrace) as info:
        loads_trace(record(job_id="ok") + "\n" + line if idx else line)
    assert info.value.record == idx


def test_duplicate_ids_and_bad_cycles():
    with pytest.raises(InvariantViolation):
        loads_trace(record() + "\n" + record())
    with pytest.raises(InvariantViolation):
        loads_trace(record(cycles=0))
    with pytest.raises(InvariantViolation):
        loads_trace(record(node_demand=0))


def test_missing_file(tmp_path):
    with pytest.raises(MalformedTrace):
        parse_trace(tmp_path / "nope.jsonl")


def test_fixture_round_trip(three_jobs, tmp_path):
    assert len(three_jobs) == 3
    out = tmp_path / "again.jsonl"
    write_trace(three_jobs, out)
    again = parse_trace(out)
    assert again == three_jobs
    assert dumps_trace(again) == dumps_trace(three_jobs)


profiles = st.builds(
    lambda period, cuts, k, sb, arr, cyc: _profile(period, cuts, k, sb, arr, cyc),
    st.integers(2, 500), st.lists(st.integers(0, 10_000), min_size=2, max_size=8, unique=True),
    st.integers(1, 4), st.integers(0, 10**10), st.floats(0, 1e5, allow_nan=False), st.integers(1, 50),
)


def _profile(period, cuts, k, sb, arr, cyc):
    pts = sorted({c % (period + 1) for c in cuts})
    segs = [(a, b - a) for a, b in zip(pts[0::2], pts[1::2]) if b > a] or [(0, period)]
    return TraceEntry(JobProfile("x", float(period), tuple(segs), k, sb, {"rollout": 1.5}), arr, cyc)


@given(profiles)
def test_serialize_parse_identity(entry):
    trace = WorkloadTrace([entry])
    assert loads_trace(dumps_trace(trace)) == trace


def test_synth_single_job():
    trace = synthesize_workload(WorkloadSpec(n_jobs=1, period_range=(100, 100), duty_range=(0.5, 0.5)), 7)
    assert trace.jobs[0].profile.segments == ((0.0, 50.0),)


def test_synth_anti_phase_pair():
    spec = WorkloadSpec(n_jobs=2, period_range=(200, 200), duty_range=(0.5, 0.5), phase="anti")
    segs = [e.profile.segments for e in synthesize_workload(spec, 0).jobs]
    assert segs == [((0.0, 100.0),), ((100.0, 100.0),)]


def test_synth_deterministic():
    spec = WorkloadSpec(n_jobs=12, period_choices=[60, 100], duty_range=(0.1, 0.9), k_range=(1, 3),
                        segments_range=(1, 3), arrival_span=500, phase="random")
    assert dumps_trace(synthesize_workload(spec, 5)) == dumps_trace(synthesize_workload(spec, 5))
    assert dumps_trace(synthesize_workload(spec, 5)) != dumps_trace(synthesize_workload(spec, 6))


@pytest.mark.parametrize("kw", [
    {"duty_range": (1.5, 1.5)},
    {"duty_range": (0.0, 0.5)},
    {"period_range": (100, 50)},
    {"k_range": (0, 1)},
    {"phase": "sideways"},
])
def test_synth_invalid_spec(kw):
    with pytest.raises(InvalidSpec):
        synthesize_workload(WorkloadSpec(n_jobs=2, **kw), 0)


def test_spec_from_dict_rejects_unknown():
    with pytest.raises(InvalidSpec):
        WorkloadSpec.from_dict({"n_jobs": 1, "colour": "red"})
    assert WorkloadSpec.from_dict({"n_jobs": 2, "duty_range": 0.3}).duty_range == (0.3, 0.3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_synth_profiles_valid(seed):
    spec = WorkloadSpec(n_jobs=5, period_range=(20, 300), duty_range=(0.05, 1.0), segments_range=(1, 4),
                        phase="random", cycles_range=(1, 9))
    for e in synthesize_workload(spec, seed).jobs:
        e.profile.validate()
        assert 1 <= e.cycles <= 9


def test_profile_two_cycles():
    # one label for both segments would make the log 50-periodic
    ev = [ExecutionEvent("j", name, s, s + 10) for s, name in ((0, "a"), (50, "b"), (100, "a"), (150, "b"))]
    p = profile_job(ev)
    assert p.period == 100
    assert p.segments == ((0.0, 10.0), (50.0, 10.0))


def test_profile_empty():
    with pytest.raises(InsufficientData):
        profile_job([])


def test_profile_single_partial_cycle():
    with pytest.raises(InsufficientData):
        profile_job([ExecutionEvent("j", "train", 0, 10)])


def test_profile_aperiodic():
    rng = random.Random(3)
    t, ev = 0.0, []
    for _ in range(30):
        t += rng.randint(1, 40)
        d = rng.randint(1, 25)
        ev.append(ExecutionEvent("j", "train", t, t + d))
        t += d
    with pytest.raises((NoPeriodicity, InsufficientData)):
        profile_job(ev)


def test_profile_jitter_means():
    """Jittered cycles: segments are per-cycle means of the observed runs."""
    rng = random.Random(11)
    ev, offs, durs = [], [], []
    for c in range(8):
        a = 20 + rng.choice([-1, 0, 1])
        d = 50 + rng.choice([-1, 0, 1])
        offs.append(a)
        durs.append(d)
        ev.append(ExecutionEvent("j", "update_actor", c * 100 + a, c * 100 + a + d))
    p = profile_job(ev, jitter_tolerance=0.05)
    assert p.period == 100
    assert p.segments[0] == pytest.approx((sum(offs) / 8, sum(durs) / 8))


@settings(max_examples=60, deadline=None)
@given(profiles, st.integers(3, 5))
def test_profile_recovers_generating_profile(entry, cycles):
    p = entry.profile
    # adjacent segments merge into one run and a full-period run has no cycle boundary
    ends = [a + d for a, d in p.segments]
    if any(e == a for e, (a, _) in zip(ends, p.segments[1:])) or p.active_time == p.period:
        return
    if p.segments[0][0] == 0 and ends[-1] == p.period:
        return
    got = profile_job(events_from_profile(p, cycles))
    assert got.period == p.period
    assert got.segments == p.segments


def test_parse_events(tmp_path):
    path = tmp_path / "ev.jsonl"
    path.write_text('{"job_id": "j", "phase": "p", "start": 0, "end": 4}\n\n')
    assert parse_events(path) == [ExecutionEvent("j", "p", 0.0, 4.0)]
    path.write_text('{"job_id": "j", "phase": "p", "start": 5, "end": 4}\n')
    with pytest.raises(InvariantViolation):
        parse_events(path)
    path.write_text('{"job_id": "j"}\n')
    with pytest.raises(MalformedTrace):
        parse_events(path)
