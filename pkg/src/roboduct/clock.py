"""Virtual/real clocks and the deterministic event scheduler.

Everything time-dependent in this package (link delays, reconnect backoff,
throttling, simulation ticks) reads one of these clocks, so a whole
bridge+duct+robot scenario can run in virtual time and stay reproducible.
"""

from __future__ import annotations

import heapq
import time
from typing import Callable

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def ms_to_ns(ms: float) -> int:
    return int(round(ms * NS_PER_MS))


def s_to_ns(s: float) -> int:
    return int(round(s * NS_PER_S))


class VirtualClock:
    """Monotonic clock that advances only when explicitly stepped."""

    def __init__(self, start_ns: int = 0):
        self._now_ns = start_ns

    def now_ns(self) -> int:
        return self._now_ns

    def _set(self, t_ns: int) -> None:
        if t_ns < self._now_ns:
            raise ValueError(f"virtual time cannot go backwards: {t_ns} < {self._now_ns}")
        self._now_ns = t_ns


class RealClock:
    """Wall-clock adapter with the same read interface as VirtualClock."""

    def __init__(self):
        self._epoch = time.monotonic_ns()

    def now_ns(self) -> int:
        return time.monotonic_ns() - self._epoch


class ScheduledEvent:
    __slots__ = ("at_ns", "key", "seq", "fn", "cancelled")

    def __init__(self, at_ns: int, key: tuple, seq: int, fn: Callable[[], None]):
        self.at_ns = at_ns
        self.key = key
        self.seq = seq
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "ScheduledEvent") -> bool:
        return (self.at_ns, self.key, self.seq) < (other.at_ns, other.key, other.seq)


class EventScheduler:
    """Deterministic event queue driving a VirtualClock.

    Events firing at the same instant are ordered by an explicit key tuple
    (e.g. sender id, frame seq) and then by insertion order, so identical
    inputs always replay identically.
    """

    def __init__(self, clock: VirtualClock | None = None):
        self.clock = clock if clock is not None else VirtualClock()
        self._heap: list[ScheduledEvent] = []
        self._seq = 0

    def schedule_at(self, at_ns: int, fn: Callable[[], None], key: tuple = ()) -> ScheduledEvent:
        if at_ns < self.clock.now_ns():
            at_ns = self.clock.now_ns()
        ev = ScheduledEvent(at_ns, key, self._seq, fn)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def schedule_in(self, delay_ns: int, fn: Callable[[], None], key: tuple = ()) -> ScheduledEvent:
        return self.schedule_at(self.clock.now_ns() + max(0, delay_ns), fn, key)

    def pending(self) -> int:
        return sum(1 for ev in self._heap if not ev.cancelled)

    def next_event_at(self) -> int | None:
        while self._heap and self._heap[0].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0].at_ns if self._heap else None

    def run_until(self, t_ns: int) -> int:
        """Run all events due at or before t_ns; leave the clock at t_ns."""
        fired = 0
        while self._heap:
            ev = self._heap[0]
            if ev.cancelled:
                heapq.heappop(self._heap)
                continue
            if ev.at_ns > t_ns:
                break
            heapq.heappop(self._heap)
            self.clock._set(ev.at_ns)
            ev.fn()
            fired += 1
        self.clock._set(max(t_ns, self.clock.now_ns()))
        return fired

    def run_for(self, duration_ns: int) -> int:
        return self.run_until(self.clock.now_ns() + duration_ns)

    def drain(self, limit_ns: int | None = None, max_events: int = 1_000_000) -> int:
        """Run until the queue is empty (or until limit_ns)."""
        fired = 0
        while True:
            nxt = self.next_event_at()
            if nxt is None or (limit_ns is not None and nxt > limit_ns):
                break
            fired += self.run_until(nxt)
            if fired > max_events:
                raise RuntimeError("event storm: drain exceeded max_events")
        if limit_ns is not None:
            self.clock._set(max(limit_ns, self.clock.now_ns()))
        return fired
