"""Spatio-temporal resource state.

The cluster timeline is a ring buffer of ``L`` slots holding the number of
free node groups per slot, indexed by a min segment tree.  Each node group
additionally keeps an :class:`IntervalSet` of free windows.  Reservations are
committed and released atomically against both views.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import OverCommit, RangeTooLong

DEFAULT_HORIZON = 28_800.0
DEFAULT_SLOT = 1.0
EPS = 1e-9


class MinSegmentTree:
    """Bottom-up segment tree answering range minima over ``values``."""

    def __init__(self, values: Sequence[int]):
        self.n = len(values)
        self.t = [0] * self.n + list(values)
        self.build()

    def build(self) -> None:
        t = self.t
        for i in range(self.n - 1, 0, -1):
            t[i] = min(t[2 * i], t[2 * i + 1])

    def add_range(self, lo: int, hi: int, delta: int) -> None:
        """Add ``delta`` to leaves ``[lo, hi)`` and refresh their ancestors."""
        t, n = self.t, self.n
        for i in range(lo + n, hi + n):
            t[i] += delta
        # leaves sit at two depths when n is not a power of two, so ancestor
        # ranges of different levels can interleave; children always have
        # larger indices, hence refresh in descending index order
        ancestors = set()
        i, j = (lo + n) >> 1, (hi - 1 + n) >> 1
        while i >= 1:
            ancestors.update(range(i, j + 1))
            i >>= 1
            j >>= 1
        for p in sorted(ancestors, reverse=True):
            t[p] = min(t[2 * p], t[2 * p + 1])

    def query(self, lo: int, hi: int) -> int:
        if not 0 <= lo < hi <= self.n:
            raise ValueError(f"interval [{lo}, {hi}) out of range")
        t = self.t
        res = math.inf
        lo += self.n
        hi += self.n
        while lo < hi:
            if lo & 1:
                res = min(res, t[lo])
                lo += 1
            if hi & 1:
                hi -= 1
                res = min(res, t[hi])
            lo >>= 1
            hi >>= 1
        return res


def ring_ranges(start: int, end: int, length: int) -> list[tuple[int, int]]:
    """Split absolute slot range ``[start, end)`` into non-wrapping ring pieces."""
    if end - start > length:
        raise RangeTooLong(f"range of {end - start} slots exceeds ring of {length}")
    if end <= start:
        return []
    s = start % length
    e = s + (end - start)
    if e <= length:
        return [(s, e)]
    return [(s, length), (0, e - length)]


class CapacityProfile:
    """Ring buffer of free node-group counts over the planning horizon."""

    def __init__(self, total_nodes: int, horizon: float = DEFAULT_HORIZON,
                 slot_len: float = DEFAULT_SLOT):
        if total_nodes < 0 or horizon <= 0 or slot_len <= 0:
            raise ValueError("total_nodes >= 0, horizon > 0 and slot_len > 0 required")
        self.total_nodes = total_nodes
        self.horizon = horizon
        self.slot_len = slot_len
        self.slots = int(round(horizon / slot_len))
        self.free_nodes = [total_nodes] * self.slots
        self.rmq = MinSegmentTree(self.free_nodes)
        self.queries = 0

    def slot_index(self, t_abs: float) -> int:
        return math.floor(t_abs / self.slot_len + EPS) % self.slots

    def to_slot(self, t_abs: float) -> int:
        """Absolute (unwrapped) slot number of ``t_abs``."""
        return math.floor(t_abs / self.slot_len + EPS)

    def min_slots(self, start: int, end: int) -> int:
        """Minimum free count over absolute slots ``[start, end)`` (wrapping)."""
        self.queries += 1
        return min(self.rmq.query(s, e) for s, e in ring_ranges(start, end, self.slots))

    def range_min_capacity(self, t0: float, t1: float) -> int:
        if not t1 > t0:
            raise ValueError("empty range")
        if t1 - t0 > self.horizon + EPS:
            raise RangeTooLong(f"span {t1 - t0} exceeds horizon {self.horizon}")
        s = math.floor(t0 / self.slot_len + EPS)
        e = max(math.ceil(t1 / self.slot_len - EPS), s + 1)
        e = min(e, s + self.slots)
        return self.min_slots(s, e)

    def add(self, start: int, end: int, delta: int) -> None:
        """Add ``delta`` over ring range ``[start, end)`` (non-wrapping)."""
        free = self.free_nodes
        for i in range(start, end):
            free[i] += delta
        self.rmq.add_range(start, end, delta)

    def rebuild(self) -> None:
        self.rmq = MinSegmentTree(self.free_nodes)

    def snapshot(self) -> tuple[int, ...]:
        return tuple(self.free_nodes)

    def to_csv(self) -> str:
        rows = ["slot,free_nodes"]
        rows.extend(f"{i},{v}" for i, v in enumerate(self.free_nodes))
        return "\n".join(rows) + "\n"


class IntervalSet:
    """Sorted disjoint half-open free windows ``[s, e)`` of one node group."""

    def __init__(self, windows: Iterable[tuple[int, int]] = ()):
        self.windows: list[tuple[int, int]] = []
        for s, e in sorted(windows):
            if e <= s:
                continue
            if self.windows and s <= self.windows[-1][1]:
                if s < self.windows[-1][1]:
                    raise ValueError("windows overlap")
                self.windows[-1] = (self.windows[-1][0], e)
            else:
                self.windows.append((s, e))
        self._starts = [s for s, _ in self.windows]

    @classmethod
    def full(cls, length: int) -> "IntervalSet":
        return cls([(0, length)])

    def __eq__(self, other) -> bool:
        return isinstance(other, IntervalSet) and self.windows == other.windows

    def __repr__(self) -> str:
        return f"IntervalSet({self.windows})"

    def copy(self) -> "IntervalSet":
        out = IntervalSet()
        out.windows = list(self.windows)
        out._starts = list(self._starts)
        return out

    def _locate(self, pos: int) -> int:
        """Index of the last window starting at or before ``pos`` (or -1)."""
        return bisect_right(self._starts, pos) - 1

    def fits(self, start: int, duration: int) -> bool:
        i = self._locate(start)
        return i >= 0 and start + duration <= self.windows[i][1]

    def next_fit(self, pos: int, duration: int) -> int | None:
        """Smallest ``p >= pos`` at which a ``duration``-slot segment fits."""
        i = self._locate(pos)
        if i >= 0 and pos + duration <= self.windows[i][1]:
            return pos
        for s, e in self.windows[i + 1:]:
            if e - s >= duration:
                return s
        return None

    def free_slots(self) -> int:
        return sum(e - s for s, e in self.windows)

    def occupy(self, start: int, end: int) -> None:
        i = self._locate(start)
        if i < 0 or end > self.windows[i][1]:
            raise OverCommit(f"[{start}, {end}) is not inside a free window")
        s, e = self.windows[i]
        pieces = [(a, b) for a, b in ((s, start), (end, e)) if b > a]
        self.windows[i:i + 1] = pieces
        self._starts[i:i + 1] = [a for a, _ in pieces]

    def is_occupied(self, start: int, end: int) -> bool:
        """True when no free window intersects ``[start, end)``."""
        i = self._locate(start)
        if i >= 0 and self.windows[i][1] > start:
            return False
        return not (i + 1 < len(self.windows) and self.windows[i + 1][0] < end)

    def release(self, start: int, end: int) -> None:
        i = self._locate(start)
        if i >= 0 and self.windows[i][1] > start:
            raise OverCommit(f"[{start}, {end}) overlaps a free window")
        if i + 1 < len(self.windows) and self.windows[i + 1][0] < end:
            raise OverCommit(f"[{start}, {end}) overlaps a free window")
        s, e = start, end
        lo, hi = i + 1, i + 1
        if i >= 0 and self.windows[i][1] == start:
            s = self.windows[i][0]
            lo = i
        if hi < len(self.windows) and self.windows[hi][0] == end:
            e = self.windows[hi][1]
            hi += 1
        self.windows[lo:hi] = [(s, e)]
        self._starts[lo:hi] = [s]


def fit_segment(intervals: IntervalSet, start: int, duration: int) -> bool:
    return intervals.fits(start, duration)


@dataclass(frozen=True)
class Reservation:
    """Footprint of one placed job: ring ranges held on every listed group."""

    job_id: str
    node_group_ids: tuple[int, ...]
    occupied: tuple[tuple[int, int], ...]

    @property
    def k(self) -> int:
        return len(self.node_group_ids)


def _check_disjoint(ranges: Sequence[tuple[int, int]]) -> None:
    ordered = sorted(ranges)
    for (s1, e1), (s2, _) in zip(ordered, ordered[1:]):
        if s2 < e1:
            raise OverCommit(f"reservation ranges overlap at slot {s2}")


def commit_reservation(profile: CapacityProfile, node_intervals: Sequence[IntervalSet],
                       reservation: Reservation) -> None:
    """Subtract ``reservation`` from both views; all-or-nothing."""
    k = reservation.k
    _check_disjoint(reservation.occupied)
    if len(set(reservation.node_group_ids)) != k:
        raise OverCommit("duplicate node group in reservation")
    for s, e in reservation.occupied:
        if not 0 <= s < e <= profile.slots:
            raise OverCommit(f"range [{s}, {e}) outside the ring")
        if profile.rmq.query(s, e) < k:
            raise OverCommit(f"slots [{s}, {e}) have fewer than {k} free groups")
        for g in reservation.node_group_ids:
            if not node_intervals[g].fits(s, e - s):
                raise OverCommit(f"group {g} is busy within [{s}, {e})")
    for s, e in reservation.occupied:
        profile.add(s, e, -k)
        for g in reservation.node_group_ids:
            node_intervals[g].occupy(s, e)


def release_reservation(profile: CapacityProfile, node_intervals: Sequence[IntervalSet],
                        reservation: Reservation) -> None:
    k = reservation.k
    for s, e in reservation.occupied:
        if max(profile.free_nodes[s:e]) + k > profile.total_nodes:
            raise OverCommit(f"releasing [{s}, {e}) would exceed total capacity")
        for g in reservation.node_group_ids:
            if not node_intervals[g].is_occupied(s, e):
                raise OverCommit(f"group {g} does not hold [{s}, {e})")
    for s, e in reservation.occupied:
        profile.add(s, e, k)
        for g in reservation.node_group_ids:
            node_intervals[g].release(s, e)
