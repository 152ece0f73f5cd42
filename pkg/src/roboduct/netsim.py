"""Deterministic impaired-link simulator between duct and bridge.

Models a websocket-like FIFO byte-frame link: one-way latency, uniform
jitter, a serialization-rate bandwidth cap, whole-connection disconnects
(scheduled or random), and per-frame drop probability. Identical
(profile, seed, input trace) always produce identical delivery traces.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

import yaml

from .clock import NS_PER_MS, EventScheduler, ms_to_ns


@dataclass(frozen=True)
class RandomDisconnects:
    mean_up_ms: float
    mean_down_ms: float


@dataclass
class LinkProfile:
    one_way_latency_ms: float = 0.0
    jitter_ms: float = 0.0
    bandwidth_bytes_per_s: Optional[float] = None
    disconnect_schedule: list = field(default_factory=list)  # [(t_down_ms, duration_ms)]
    random_disconnects: Optional[RandomDisconnects] = None
    drop_prob: float = 0.0

    def validate(self) -> None:
        if self.one_way_latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must be in [0,1]")
        if self.bandwidth_bytes_per_s is not None and self.bandwidth_bytes_per_s <= 0:
            raise ValueError("bandwidth must be positive")
        prev_end = -1.0
        for t_down, duration in sorted(self.disconnect_schedule):
            if duration <= 0:
                raise ValueError("disconnect duration must be positive")
            if t_down < prev_end:
                raise ValueError("disconnect intervals overlap")
            prev_end = t_down + duration
        if self.random_disconnects and self.disconnect_schedule:
            raise ValueError("use either a fixed schedule or random disconnects, not both")

    def to_dict(self) -> dict:
        d = {
            "one_way_latency_ms": self.one_way_latency_ms,
            "jitter_ms": self.jitter_ms,
            "bandwidth_bytes_per_s": self.bandwidth_bytes_per_s,
            "disconnect_schedule": [list(iv) for iv in self.disconnect_schedule],
            "drop_prob": self.drop_prob,
        }
        if self.random_disconnects:
            d["random_disconnects"] = {
                "mean_up_ms": self.random_disconnects.mean_up_ms,
                "mean_down_ms": self.random_disconnects.mean_down_ms,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LinkProfile":
        rnd = d.get("random_disconnects")
        profile = cls(
            one_way_latency_ms=float(d.get("one_way_latency_ms", 0.0)),
            jitter_ms=float(d.get("jitter_ms", 0.0)),
            bandwidth_bytes_per_s=d.get("bandwidth_bytes_per_s"),
            disconnect_schedule=[tuple(iv) for iv in d.get("disconnect_schedule", [])],
            random_disconnects=RandomDisconnects(**rnd) if rnd else None,
            drop_prob=float(d.get("drop_prob", 0.0)),
        )
        profile.validate()
        return profile

    @classmethod
    def from_file(cls, path: str) -> "LinkProfile":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


DELIVERED = "delivered"
DROPPED = "dropped"
LOST_DOWN = "lost_disconnect"
IN_FLIGHT = "in_flight"


@dataclass
class TraceRecord:
    t_send_ns: int
    outcome: str  # delivered | dropped | lost_disconnect | in_flight
    t_arrive_ns: Optional[int]
    size: int
    label: str
    direction: str

    def line(self) -> str:
        arrive = "-" if self.t_arrive_ns is None else f"{self.t_arrive_ns / NS_PER_MS:.3f}"
        return (f"{self.t_send_ns / NS_PER_MS:.3f} {self.outcome} {arrive} "
                f"{self.size} {self.direction} {self.label or '-'}")


@dataclass
class LinkCounters:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    lost_disconnect: int = 0
    bytes_sent: int = 0
    bytes_delivered: int = 0

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered - self.dropped - self.lost_disconnect


class Endpoint:
    """One side of a simulated link."""

    def __init__(self, link: "SimLink", direction: str, name: str):
        self._link = link
        self._direction = direction
        self.name = name
        self.on_receive: Optional[Callable[[bytes, str], None]] = None
        self.on_down: Optional[Callable[[], None]] = None
        self.on_up: Optional[Callable[[], None]] = None

    @property
    def connected(self) -> bool:
        return self._link.up

    def send(self, data: bytes, label: str = "") -> None:
        self._link._send(self._direction, bytes(data), label)


class _Flight:
    __slots__ = ("record", "event")

    def __init__(self, record: TraceRecord, event):
        self.record = record
        self.event = event


class SimLink:
    """The link itself; drives delivery through a shared EventScheduler."""

    def __init__(self, profile: LinkProfile, scheduler: EventScheduler, seed: int = 0):
        profile.validate()
        self.profile = profile
        self.scheduler = scheduler
        self.rng = random.Random(seed)
        self._disc_rng = random.Random(seed ^ 0x5EED)
        self.up = True
        self.endpoint_a = Endpoint(self, "a2b", "a")
        self.endpoint_b = Endpoint(self, "b2a", "b")
        self.counters = {"a2b": LinkCounters(), "b2a": LinkCounters()}
        self.trace: list[TraceRecord] = []
        self._seq = 0
        self._busy_until = {"a2b": 0, "b2a": 0}
        self._last_arrival = {"a2b": 0, "b2a": 0}
        self._in_flight: dict[str, list[_Flight]] = {"a2b": [], "b2a": []}
        self._origin_ns = scheduler.clock.now_ns()
        self._install_schedule()

    # -- disconnect schedule -------------------------------------------------

    def _install_schedule(self) -> None:
        for t_down_ms, duration_ms in self.profile.disconnect_schedule:
            down_at = self._origin_ns + ms_to_ns(t_down_ms)
            up_at = down_at + ms_to_ns(duration_ms)
            self.scheduler.schedule_at(down_at, self._go_down, key=("link", 0))
            self.scheduler.schedule_at(up_at, self._go_up, key=("link", 0))
        if self.profile.random_disconnects:
            self._schedule_random_down()

    def _schedule_random_down(self) -> None:
        up_ms = self._disc_rng.expovariate(1.0 / self.profile.random_disconnects.mean_up_ms)
        self.scheduler.schedule_in(ms_to_ns(up_ms), self._random_down, key=("link", 0))

    def _random_down(self) -> None:
        self._go_down()
        down_ms = self._disc_rng.expovariate(1.0 / self.profile.random_disconnects.mean_down_ms)
        self.scheduler.schedule_in(ms_to_ns(down_ms), self._random_up, key=("link", 0))

    def _random_up(self) -> None:
        self._go_up()
        self._schedule_random_down()

    def _go_down(self) -> None:
        if not self.up:
            return
        self.up = False
        now = self.scheduler.clock.now_ns()
        for direction in ("a2b", "b2a"):
            for flight in self._in_flight[direction]:
                flight.event.cancel()
                flight.record.outcome = LOST_DOWN
                self.counters[direction].lost_disconnect += 1
            self._in_flight[direction].clear()
            self._busy_until[direction] = now
        for ep in (self.endpoint_a, self.endpoint_b):
            if ep.on_down:
                ep.on_down()

    def _go_up(self) -> None:
        if self.up:
            return
        self.up = True
        for ep in (self.endpoint_a, self.endpoint_b):
            if ep.on_up:
                ep.on_up()

    # -- frame transfer --------------------------------------------------------

    def _send(self, direction: str, data: bytes, label: str) -> None:
        now = self.scheduler.clock.now_ns()
        counters = self.counters[direction]
        counters.sent += 1
        counters.bytes_sent += len(data)
        record = TraceRecord(now, IN_FLIGHT, None, len(data), label, direction)
        self.trace.append(record)

        if not self.up:
            record.outcome = LOST_DOWN
            counters.lost_disconnect += 1
            return
        if self.profile.drop_prob > 0 and self.rng.random() < self.profile.drop_prob:
            record.outcome = DROPPED
            counters.dropped += 1
            return

        start = max(now, self._busy_until[direction])
        if self.profile.bandwidth_bytes_per_s:
            start += int(len(data) / self.profile.bandwidth_bytes_per_s * 1e9)
        self._busy_until[direction] = start

        latency_ns = ms_to_ns(self.profile.one_way_latency_ms)
        if self.profile.jitter_ms > 0:
            latency_ns += ms_to_ns(self.rng.uniform(-self.profile.jitter_ms,
                                                    self.profile.jitter_ms))
        arrival = max(start + max(0, latency_ns), self._last_arrival[direction])
        self._last_arrival[direction] = arrival

        self._seq += 1
        endpoint = self.endpoint_b if direction == "a2b" else self.endpoint_a
        flight = _Flight(record, None)

        def deliver():
            self._in_flight[direction].remove(flight)
            record.outcome = DELIVERED
            record.t_arrive_ns = self.scheduler.clock.now_ns()
            counters.delivered += 1
            counters.bytes_delivered += len(data)
            if endpoint.on_receive:
                endpoint.on_receive(data, label)

        flight.event = self.scheduler.schedule_at(arrival, deliver, key=("deliver", direction, self._seq))
        self._in_flight[direction].append(flight)

    # -- convenience / introspection -----------------------------------------

    def step(self, duration_ms: float) -> list[TraceRecord]:
        """Advance virtual time, returning frames delivered in the window."""
        before = [r for r in self.trace if r.outcome == DELIVERED]
        self.scheduler.run_for(ms_to_ns(duration_ms))
        after = [r for r in self.trace if r.outcome == DELIVERED]
        return after[len(before):]

    def totals(self) -> LinkCounters:
        total = LinkCounters()
        for c in self.counters.values():
            total.sent += c.sent
            total.delivered += c.delivered
            total.dropped += c.dropped
            total.lost_disconnect += c.lost_disconnect
            total.bytes_sent += c.bytes_sent
            total.bytes_delivered += c.bytes_delivered
        return total

    def flush_in_flight_as_lost(self) -> None:
        """End-of-run accounting: anything still airborne counts as lost."""
        for direction in ("a2b", "b2a"):
            for flight in self._in_flight[direction]:
                flight.event.cancel()
                flight.record.outcome = LOST_DOWN
                self.counters[direction].lost_disconnect += 1
            self._in_flight[direction].clear()

    def export_trace(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.trace:
                fh.write(record.line() + "\n")


def attach(profile: LinkProfile, scheduler: EventScheduler, seed: int = 0) -> tuple[Endpoint, Endpoint]:
    """Create a link and return its two endpoints."""
    link = SimLink(profile, scheduler, seed)
    return link.endpoint_a, link.endpoint_b
