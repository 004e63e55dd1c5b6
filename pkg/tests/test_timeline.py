import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclesched.errors import OverCommit, RangeTooLong
from cyclesched.timeline import (CapacityProfile, IntervalSet, MinSegmentTree, Reservation,
                                 commit_reservation, fit_segment, release_reservation, ring_ranges)


def scan_min(free, t0, t1):
    """Linear-scan oracle over whole slots of [t0, t1), wrapping."""
    L = len(free)
    return min(free[i % L] for i in range(t0, t1))


def scan_fits(windows, start, duration):
    return any(s <= start and start + duration <= e for s, e in windows)


@pytest.mark.parametrize("t,slot", [(0, 0), (28_800, 0), (30_000, 1200), (28_799.5, 28_799)])
def test_slot_index(t, slot):
    assert CapacityProfile(8).slot_index(t) == slot


def test_uniform_capacity():
    prof = CapacityProfile(8)
    assert prof.range_min_capacity(0, 28_800) == 8
    assert prof.range_min_capacity(123.4, 5000) == 8


def test_reserved_block():
    prof = CapacityProfile(8)
    prof.add(10, 20, -3)
    assert prof.range_min_capacity(0, 30) == 5
    assert prof.range_min_capacity(0, 10) == 8
    assert prof.range_min_capacity(19.5, 20.5) == 5


def test_wrapping_query():
    L = 28_800
    prof = CapacityProfile(8)
    rng = random.Random(1)
    for i in list(range(L - 5, L)) + list(range(5)):
        prof.add(i, i + 1, -rng.randint(0, 8))
    expect = min(prof.free_nodes[L - 5:] + prof.free_nodes[:5])
    assert prof.range_min_capacity(L - 5, L + 5) == expect


def test_range_too_long():
    prof = CapacityProfile(2, horizon=100)
    with pytest.raises(RangeTooLong):
        prof.range_min_capacity(0, 101)
    assert prof.range_min_capacity(0, 100) == 2
    with pytest.raises(RangeTooLong):
        ring_ranges(0, 101, 100)


def test_range_min_matches_scan():
    rng = random.Random(2024)
    L = 997
    prof = CapacityProfile(16, horizon=L)
    for _ in range(300):
        s = rng.randrange(L)
        e = rng.randint(s + 1, min(L, s + 60))
        if min(prof.free_nodes[s:e]) > 0:
            prof.add(s, e, -rng.randint(1, min(prof.free_nodes[s:e])))
    for _ in range(10_000):
        t0 = rng.randrange(3 * L)
        t1 = t0 + rng.randint(1, L)
        assert prof.range_min_capacity(t0, t1) == scan_min(prof.free_nodes, t0, t1)


def test_segment_tree_matches_scan():
    rng = random.Random(5)
    vals = [rng.randint(0, 50) for _ in range(301)]
    tree = MinSegmentTree(vals)
    for _ in range(2000):
        lo = rng.randrange(301)
        hi = rng.randint(lo + 1, 301)
        if rng.random() < 0.3:
            d = rng.randint(-5, 5)
            tree.add_range(lo, hi, d)
            for i in range(lo, hi):
                vals[i] += d
        else:
            assert tree.query(lo, hi) == min(vals[lo:hi])


def test_fit_segment_examples():
    ws = IntervalSet([(0, 20)])
    assert fit_segment(ws, 5, 10)
    assert not fit_segment(ws, 15, 10)


def random_windows(rng, L=500):
    cuts = sorted(rng.sample(range(L + 1), 2 * rng.randint(0, 12)))
    return [(a, b) for a, b in zip(cuts[0::2], cuts[1::2])]


def test_fit_segment_matches_scan():
    rng = random.Random(7)
    for _ in range(10_000):
        windows = random_windows(rng)
        ws = IntervalSet(windows)
        start, dur = rng.randrange(520), rng.randint(1, 80)
        assert fit_segment(ws, start, dur) == scan_fits(ws.windows, start, dur)
        nxt = ws.next_fit(start, dur)
        brute = next((p for p in range(start, 600) if scan_fits(ws.windows, p, dur)), None)
        assert nxt == brute


def test_interval_set_occupy_release_round_trip():
    rng = random.Random(9)
    for _ in range(500):
        ws = IntervalSet(random_windows(rng))
        before = ws.copy()
        free = [(s, e) for s, e in ws.windows]
        if not free:
            continue
        s, e = rng.choice(free)
        a = rng.randrange(s, e)
        b = rng.randint(a + 1, e)
        ws.occupy(a, b)
        assert ws.is_occupied(a, b)
        assert ws.free_slots() == before.free_slots() - (b - a)
        ws.release(a, b)
        assert ws == before


def test_interval_set_errors():
    ws = IntervalSet([(0, 10), (20, 30)])
    with pytest.raises(OverCommit):
        ws.occupy(5, 15)
    with pytest.raises(OverCommit):
        ws.release(8, 12)
    with pytest.raises(ValueError):
        IntervalSet([(0, 10), (5, 15)])


def periodic(period, segs, horizon):
    out = []
    for base in range(0, horizon, period):
        out += [(base + a, base + a + d) for a, d in segs]
    return tuple(out)


def test_commit_periodic_occurrences():
    prof = CapacityProfile(1, horizon=300)
    groups = [IntervalSet.full(300)]
    res = Reservation("j", (0,), periodic(100, [(0, 10)], 300))
    commit_reservation(prof, groups, res)
    expected = [0 if i % 100 < 10 else 1 for i in range(300)]
    assert prof.free_nodes == expected
    assert groups[0].windows == [(10, 100), (110, 200), (210, 300)]


def test_commit_release_identity():
    prof = CapacityProfile(4, horizon=1000)
    groups = [IntervalSet.full(1000) for _ in range(4)]
    snap, wins = prof.snapshot(), [g.copy() for g in groups]
    res = Reservation("j", (1, 3), periodic(250, [(10, 40), (100, 5)], 1000))
    commit_reservation(prof, groups, res)
    assert prof.snapshot() != snap
    release_reservation(prof, groups, res)
    assert prof.snapshot() == snap
    assert groups == wins
    assert prof.rmq.t == CapacityProfile(4, horizon=1000).rmq.t


def test_overcommit_leaves_state_unchanged():
    prof = CapacityProfile(8, horizon=100)
    groups = [IntervalSet.full(100) for _ in range(8)]
    snap = prof.snapshot()
    with pytest.raises(OverCommit):
        commit_reservation(prof, groups, Reservation("big", tuple(range(9)), ((0, 10),)))
    assert prof.snapshot() == snap
    # second range fails after the first would fit: still no partial mutation
    groups[2].occupy(50, 60)
    with pytest.raises(OverCommit):
        commit_reservation(prof, groups, Reservation("j", (1, 2), ((0, 10), (55, 58))))
    assert prof.snapshot() == snap
    assert groups[1] == IntervalSet.full(100)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sets(st.integers(0, 3), min_size=1, max_size=4),
                          st.integers(0, 190), st.integers(1, 30), st.booleans()), max_size=25))
def test_conservation_under_commits(ops):
    """Sum of held occupancy plus free count equals total capacity at every slot."""
    prof = CapacityProfile(4, horizon=200)
    groups = [IntervalSet.full(200) for _ in range(4)]
    held = []
    for i, (gs, s, d, release) in enumerate(ops):
        if release and held:
            res = held.pop(0)
            release_reservation(prof, groups, res)
            continue
        res = Reservation(f"j{i}", tuple(sorted(gs)), ((s, min(200, s + d)),))
        before = prof.snapshot()
        try:
            commit_reservation(prof, groups, res)
            held.append(res)
        except OverCommit:
            assert prof.snapshot() == before
    for slot in range(200):
        occ = sum(r.k for r in held for s, e in r.occupied if s <= slot < e)
        assert occ + prof.free_nodes[slot] == 4
        assert prof.free_nodes[slot] >= 0
    assert prof.min_slots(0, 200) == min(prof.free_nodes)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=300), st.data())
def test_segment_tree_state_matches_rebuild(vals, data):
    """Internal nodes equal a fresh build, not just the answered minima."""
    tree = MinSegmentTree(vals)
    n = len(vals)
    for _ in range(data.draw(st.integers(1, 6))):
        lo = data.draw(st.integers(0, n - 1))
        hi = data.draw(st.integers(lo + 1, n))
        d = data.draw(st.integers(-3, 3))
        tree.add_range(lo, hi, d)
        vals = vals[:lo] + [v + d for v in vals[lo:hi]] + vals[hi:]
    assert tree.t == MinSegmentTree(vals).t
