"""Scenario runner: robot -> duct -> impaired link -> bridge -> cloud client.

Runs named traffic scenarios on one virtual clock and reports per-topic
conservation accounting (sent = delivered + lost to disconnects + dropped
by queues/throttles), one-way latency percentiles, delivered scan frame
rate, reconnect counts and bytes on the wire. Reports are deterministic
for a fixed (scenario, seed).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

import yaml

from . import wirecodec as wc
from .bridge import BridgeCore, Route
from .clock import NS_PER_MS, EventScheduler, s_to_ns
from .duct import DuctClient, DuctConfig, TopicRule
from .harness import CloudClient, VirtualListener, VirtualPipe
from .msggraph import MessageGraph, TopicSpec
from .netsim import DELIVERED, DROPPED, LOST_DOWN, LinkProfile
from .robotsim import RobotSim, RobotPose, ScanSpec, World, square_room

TRAFFIC_NAV = "nav"
TRAFFIC_BULK = "bulk"

BULK_TOPIC = "/blob"
DRAIN_GRACE_S = 3.0


class ScenarioInvalid(Exception):
    pass


@dataclass
class ScenarioSpec:
    name: str
    traffic: str = TRAFFIC_NAV
    duration_s: float = 10.0
    seed: int = 0
    encoding: str = wc.ENCODING_CBOR
    link: LinkProfile = field(default_factory=LinkProfile)
    tick_hz: float = 20.0
    scan: ScanSpec = field(default_factory=ScanSpec)
    world: Optional[World] = None
    scan_throttle_ms: Optional[int] = None
    disconnect_buffer: int = 100
    bulk_payload_bytes: int = 262_144
    bulk_rate_hz: float = 2.0
    drive: tuple = (0.3, 0.2)  # constant (v, omega) command from the cloud

    def validate(self) -> None:
        if self.duration_s <= 0:
            raise ScenarioInvalid("duration must be positive")
        if self.traffic not in (TRAFFIC_NAV, TRAFFIC_BULK):
            raise ScenarioInvalid(f"unknown traffic kind {self.traffic!r}")
        if self.encoding not in wc.ENCODINGS:
            raise ScenarioInvalid(f"unknown encoding {self.encoding!r}")
        self.link.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        scan_cfg = d.get("scan", {})
        world_cfg = d.get("world")
        if isinstance(world_cfg, str):
            world = World.from_file(world_cfg)
        elif isinstance(world_cfg, (int, float)):
            world = square_room(float(world_cfg))
        else:
            world = None
        spec = cls(
            name=d["name"],
            traffic=d.get("traffic", TRAFFIC_NAV),
            duration_s=float(d.get("duration_s", 10.0)),
            seed=int(d.get("seed", 0)),
            encoding=d.get("encoding", wc.ENCODING_CBOR),
            link=LinkProfile.from_dict(d.get("link", {})),
            tick_hz=float(d.get("tick_hz", 20.0)),
            scan=ScanSpec(
                n_beams=int(scan_cfg.get("n_beams", 360)),
                fov_rad=float(scan_cfg.get("fov_rad", 6.283185307179586)),
                max_range_m=float(scan_cfg.get("max_range_m", 3.5)),
                rate_hz=float(scan_cfg.get("rate_hz", 5.0)),
            ),
            world=world,
            scan_throttle_ms=d.get("scan_throttle_ms"),
            disconnect_buffer=int(d.get("disconnect_buffer", 100)),
            bulk_payload_bytes=int(d.get("bulk_payload_bytes", 262_144)),
            bulk_rate_hz=float(d.get("bulk_rate_hz", 2.0)),
            drive=tuple(d.get("drive", (0.3, 0.2))),
        )
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path: str) -> "ScenarioSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


@dataclass
class TopicStats:
    sent: int = 0
    delivered: int = 0
    lost_disconnect: int = 0
    dropped_queue: int = 0

    def balanced(self) -> bool:
        return self.sent == self.delivered + self.lost_disconnect + self.dropped_queue


@dataclass
class RunReport:
    scenario: str
    seed: int
    encoding: str
    duration_s: float
    topics: dict = field(default_factory=dict)  # topic -> TopicStats
    latency_p50_ms: Optional[float] = None
    latency_p95_ms: Optional[float] = None
    latency_p99_ms: Optional[float] = None
    delivered_scan_fps: Optional[float] = None
    reconnects: int = 0
    downtime_ms: float = 0.0
    bytes_on_wire: int = 0
    rtf: list = field(default_factory=list)

    def conservation_ok(self) -> bool:
        return all(stats.balanced() for stats in self.topics.values())

    def to_dict(self) -> dict:
        d = {
            "scenario": self.scenario, "seed": self.seed, "encoding": self.encoding,
            "duration_s": self.duration_s,
            "topics": {t: vars(s) for t, s in sorted(self.topics.items())},
            "latency_p50_ms": self.latency_p50_ms,
            "latency_p95_ms": self.latency_p95_ms,
            "latency_p99_ms": self.latency_p99_ms,
            "delivered_scan_fps": self.delivered_scan_fps,
            "reconnects": self.reconnects,
            "downtime_ms": self.downtime_ms,
            "bytes_on_wire": self.bytes_on_wire,
            "rtf": self.rtf,
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        report = cls(scenario=d["scenario"], seed=d["seed"], encoding=d["encoding"],
                     duration_s=d["duration_s"])
        report.topics = {t: TopicStats(**s) for t, s in d.get("topics", {}).items()}
        for key in ("latency_p50_ms", "latency_p95_ms", "latency_p99_ms",
                    "delivered_scan_fps", "reconnects", "downtime_ms", "bytes_on_wire", "rtf"):
            setattr(report, key, d.get(key, getattr(report, key)))
        return report

    def table(self) -> str:
        lines = [f"scenario {self.scenario} seed={self.seed} encoding={self.encoding} "
                 f"duration={self.duration_s}s"]
        lines.append(f"{'topic':<12}{'sent':>8}{'delivered':>11}{'lost_disc':>11}{'dropped':>9}")
        for topic, s in sorted(self.topics.items()):
            lines.append(f"{topic:<12}{s.sent:>8}{s.delivered:>11}{s.lost_disconnect:>11}"
                         f"{s.dropped_queue:>9}")
        if self.latency_p50_ms is not None:
            lines.append(f"latency ms p50={self.latency_p50_ms:.3f} "
                         f"p95={self.latency_p95_ms:.3f} p99={self.latency_p99_ms:.3f}")
        if self.delivered_scan_fps is not None:
            lines.append(f"delivered scan fps {self.delivered_scan_fps:.2f}")
        lines.append(f"reconnects {self.reconnects}  downtime {self.downtime_ms:.1f} ms")
        lines.append(f"bytes on wire {self.bytes_on_wire}")
        return "\n".join(lines)


def _percentile(sorted_values: list[float], q: float) -> float:
    if not sorted_values:
        raise ValueError("no samples")
    idx = min(len(sorted_values) - 1, max(0, int(round(q * (len(sorted_values) - 1)))))
    return sorted_values[idx]


def _bulk_payload(rng: random.Random, n_bytes: int) -> dict:
    # Pointcloud-like structured payload: ~9 encoded bytes per float in CBOR.
    n_floats = max(1, n_bytes // 9)
    return {"points": [rng.uniform(-10.0, 10.0) for _ in range(n_floats)],
            "frame": "camera"}


def run(scenario: ScenarioSpec, introspect=None) -> RunReport:
    """Execute one scenario end to end on a virtual clock.

    introspect(bridge, duct), if given, is called while the stack is still
    up so callers can assert structural properties (e.g. socket counts).
    """
    scenario.validate()
    scheduler = EventScheduler()
    clock = scheduler.clock
    rng = random.Random(scenario.seed)

    route = Route("bench", isolated=True)
    bridge = BridgeCore([route], clock=clock, scheduler=scheduler)
    VirtualListener(bridge)

    local_graph = MessageGraph(clock=clock)

    if scenario.traffic == TRAFFIC_NAV:
        out_rules = [TopicRule("/odom", "nav/Odometry", queue_length=50),
                     TopicRule("/scan", "sensor/LaserScan", queue_length=50)]
        in_rules = [TopicRule("/cmd_vel", "geometry/Twist", queue_length=10)]
    else:
        out_rules = [TopicRule(BULK_TOPIC, "sensor/PointCloud", queue_length=10)]
        in_rules = []

    duct_config = DuctConfig(route=route.name, encoding_pref=(scenario.encoding,),
                             local_to_remote=out_rules, remote_to_local=in_rules,
                             disconnect_buffer=scenario.disconnect_buffer)
    pipe = VirtualPipe(bridge, route.path, scheduler, scenario.link, seed=scenario.seed)
    duct = DuctClient(duct_config, local_graph, scheduler, pipe.transport_factory,
                      seed=scenario.seed)

    client = CloudClient(bridge, route.path, encoding=scenario.encoding)
    latencies_ns: list[int] = []
    delivered: dict[str, int] = {}

    def on_publish(frame: wc.WireFrame) -> None:
        delivered[frame.topic] = delivered.get(frame.topic, 0) + 1
        if frame.stamp_ns is not None:
            latencies_ns.append(clock.now_ns() - frame.stamp_ns)

    client.on_publish = on_publish
    for rule in out_rules:
        throttle = scenario.scan_throttle_ms if rule.topic == "/scan" else None
        client.subscribe(rule.topic, throttle_rate_ms=throttle, queue_length=1000)

    sent: dict[str, int] = {rule.topic: 0 for rule in out_rules}
    robot = None
    if scenario.traffic == TRAFFIC_NAV:
        world = scenario.world if scenario.world is not None else square_room(4.0)
        robot = RobotSim(world, scenario.scan, local_graph, scheduler,
                         tick_hz=scenario.tick_hz, start_pose=RobotPose())
        # Count at the source so conservation covers the whole chain.
        local_graph.subscribe("/odom", callback=lambda env: _bump(sent, "/odom"))
        local_graph.subscribe("/scan", callback=lambda env: _bump(sent, "/scan"))
        robot.start(scenario.duration_s)
        client.advertise("/cmd_vel", "geometry/Twist")
        v, omega = scenario.drive

        def send_cmd():
            if clock.now_ns() >= s_to_ns(scenario.duration_s):
                return
            client.publish("/cmd_vel", {"v": v, "omega": omega})
            scheduler.schedule_in(s_to_ns(0.5), send_cmd, key=("cmd",))

        scheduler.schedule_in(s_to_ns(0.1), send_cmd, key=("cmd",))
    else:
        pub = local_graph.advertise(TopicSpec(BULK_TOPIC, "sensor/PointCloud"))
        local_graph.subscribe(BULK_TOPIC, callback=lambda env: _bump(sent, BULK_TOPIC))
        period_ns = s_to_ns(1.0 / scenario.bulk_rate_hz)
        end_ns = s_to_ns(scenario.duration_s)

        def send_bulk():
            if clock.now_ns() >= end_ns:
                return
            pub.publish(_bulk_payload(rng, scenario.bulk_payload_bytes))
            scheduler.schedule_in(period_ns, send_bulk, key=("bulk",))

        scheduler.schedule_in(period_ns, send_bulk, key=("bulk",))

    duct.start()
    scheduler.run_until(s_to_ns(scenario.duration_s))
    # Producers have stopped; let reconnects and in-flight frames settle.
    scheduler.drain(limit_ns=s_to_ns(scenario.duration_s + DRAIN_GRACE_S))
    if introspect is not None:
        introspect(bridge, duct)
    if robot is not None:
        robot.stop()

    # Remaining duct buffers never made it out.
    leftover_buffered = {topic: len(buf) for topic, buf in duct._buffers.items()}
    duct.stop()
    pipe.link.flush_in_flight_as_lost()

    report = RunReport(scenario=scenario.name, seed=scenario.seed,
                       encoding=scenario.encoding, duration_s=scenario.duration_s)
    wire_lost = {}
    wire_dropped = {}
    for record in pipe.link.trace:
        if record.outcome == LOST_DOWN:
            wire_lost[record.label] = wire_lost.get(record.label, 0) + 1
        elif record.outcome == DROPPED:
            wire_dropped[record.label] = wire_dropped.get(record.label, 0) + 1

    throttled = {}
    conn = bridge.connection_state(client.conn_id)
    if conn is not None:
        for topic, entry in conn.subscriptions.items():
            throttled[topic] = entry.throttled

    for rule in out_rules:
        topic = rule.topic
        stats = TopicStats(sent=sent.get(topic, 0),
                           delivered=delivered.get(topic, 0))
        stats.dropped_queue = (duct.stats.buffered_dropped.get(topic, 0)
                               + wire_dropped.get(topic, 0)
                               + throttled.get(topic, 0))
        stats.lost_disconnect = wire_lost.get(topic, 0) + leftover_buffered.get(topic, 0)
        report.topics[topic] = stats

    if latencies_ns:
        lat = sorted(latencies_ns)
        report.latency_p50_ms = _percentile(lat, 0.50) / NS_PER_MS
        report.latency_p95_ms = _percentile(lat, 0.95) / NS_PER_MS
        report.latency_p99_ms = _percentile(lat, 0.99) / NS_PER_MS
    if scenario.traffic == TRAFFIC_NAV:
        report.delivered_scan_fps = delivered.get("/scan", 0) / scenario.duration_s
    report.reconnects = duct.stats.reconnects
    report.downtime_ms = duct.stats.downtime_ns / NS_PER_MS
    report.bytes_on_wire = pipe.link.totals().bytes_sent
    return report


def _bump(counter: dict, topic: str) -> None:
    counter[topic] = counter.get(topic, 0) + 1


def compare(report_a: RunReport, report_b: RunReport) -> dict:
    """Per-metric deltas between two runs of the same scenario and seed."""
    if report_a.scenario != report_b.scenario or report_a.seed != report_b.seed:
        raise ScenarioInvalid("reports are not comparable: scenario/seed differ")
    deltas = {
        "scenario": report_a.scenario,
        "seed": report_a.seed,
        "encodings": [report_a.encoding, report_b.encoding],
        "bytes_on_wire": [report_a.bytes_on_wire, report_b.bytes_on_wire],
        "bytes_ratio": (report_b.bytes_on_wire / report_a.bytes_on_wire
                        if report_a.bytes_on_wire else None),
    }
    for key in ("latency_p50_ms", "latency_p95_ms", "latency_p99_ms",
                "delivered_scan_fps", "reconnects", "downtime_ms"):
        a, b = getattr(report_a, key), getattr(report_b, key)
        deltas[key] = None if a is None or b is None else b - a
    deltas["topics"] = {}
    for topic in sorted(set(report_a.topics) | set(report_b.topics)):
        sa = report_a.topics.get(topic, TopicStats())
        sb = report_b.topics.get(topic, TopicStats())
        deltas["topics"][topic] = {k: getattr(sb, k) - getattr(sa, k)
                                   for k in ("sent", "delivered", "lost_disconnect",
                                             "dropped_queue")}
    return deltas
