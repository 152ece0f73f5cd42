"""Desk-scale differential-drive robot: kinematics, 2-D lidar, sim loop.

Publishes odometry and laser scans on the device-side graph, consumes
velocity commands, and measures real-time factor (sim time advanced per
wall-clock second) under injectable per-tick compute load.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import EventScheduler, s_to_ns
from .msggraph import MessageGraph, QueuePolicy, TopicSpec

OMEGA_STRAIGHT_EPS = 1e-9


def normalize_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    theta = math.fmod(theta, 2 * math.pi)
    if theta <= -math.pi:
        theta += 2 * math.pi
    elif theta > math.pi:
        theta -= 2 * math.pi
    return theta


@dataclass(frozen=True)
class RobotPose:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0


def step_kinematics(pose: RobotPose, v: float, omega: float, dt: float) -> RobotPose:
    """Exact unicycle step: straight line or circular arc."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if abs(omega) < OMEGA_STRAIGHT_EPS:
        x = pose.x + v * math.cos(pose.theta) * dt
        y = pose.y + v * math.sin(pose.theta) * dt
        theta = pose.theta + omega * dt
    else:
        theta1 = pose.theta + omega * dt
        r = v / omega
        x = pose.x + r * (math.sin(theta1) - math.sin(pose.theta))
        y = pose.y - r * (math.cos(theta1) - math.cos(pose.theta))
        theta = theta1
    return RobotPose(x, y, normalize_angle(theta))


@dataclass(frozen=True)
class Segment:
    x1: float
    y1: float
    x2: float
    y2: float


@dataclass
class World:
    segments: list[Segment] = field(default_factory=list)
    bounds: tuple[float, float, float, float] = (-10.0, -10.0, 10.0, 10.0)

    def contains(self, pose: RobotPose) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= pose.x <= xmax and ymin <= pose.y <= ymax

    @classmethod
    def from_file(cls, path: str) -> "World":
        segments = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                x1, y1, x2, y2 = (float(tok) for tok in line.split())
                segments.append(Segment(x1, y1, x2, y2))
        if segments:
            xs = [c for s in segments for c in (s.x1, s.x2)]
            ys = [c for s in segments for c in (s.y1, s.y2)]
            bounds = (min(xs) - 1, min(ys) - 1, max(xs) + 1, max(ys) + 1)
        else:
            bounds = (-10.0, -10.0, 10.0, 10.0)
        return cls(segments, bounds)


def square_room(side: float, center: tuple[float, float] = (0.0, 0.0)) -> World:
    cx, cy = center
    h = side / 2.0
    corners = [(cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h)]
    segments = [Segment(*corners[i], *corners[(i + 1) % 4]) for i in range(4)]
    return World(segments, (cx - h, cy - h, cx + h, cy + h))


@dataclass(frozen=True)
class ScanSpec:
    n_beams: int = 360
    fov_rad: float = 2 * math.pi
    max_range_m: float = 3.5
    rate_hz: float = 5.0

    def __post_init__(self):
        if self.n_beams < 1 or self.max_range_m <= 0 or self.rate_hz <= 0:
            raise ValueError("invalid scan spec")


def ray_segment_intersection(ox: float, oy: float, dx: float, dy: float,
                             seg: Segment) -> Optional[float]:
    """Distance along the (unit) ray to the segment, or None if missed."""
    ex = seg.x2 - seg.x1
    ey = seg.y2 - seg.y1
    denom = dx * ey - dy * ex
    if abs(denom) < 1e-15:
        return None  # parallel (collinear overlap treated as miss)
    qx = seg.x1 - ox
    qy = seg.y1 - oy
    t = (qx * ey - qy * ex) / denom      # along the ray
    u = (qx * dy - qy * dx) / denom      # along the segment
    if t >= 0.0 and 0.0 <= u <= 1.0:
        return t
    return None


def render_scan(world: World, pose: RobotPose, spec: ScanSpec) -> list[float]:
    """Beam i points at heading + i * fov / n_beams; ranges clipped to max."""
    ranges = []
    step = spec.fov_rad / spec.n_beams
    for i in range(spec.n_beams):
        angle = pose.theta + i * step
        dx, dy = math.cos(angle), math.sin(angle)
        best = spec.max_range_m
        for seg in world.segments:
            t = ray_segment_intersection(pose.x, pose.y, dx, dy, seg)
            if t is not None and t < best:
                best = t
        ranges.append(best)
    return ranges


class RobotSim:
    """Tick-driven simulation node on a virtual-clock graph.

    Publishes /odom at the tick rate and /scan at the scan rate, applies
    the most recent /cmd_vel at each tick boundary (commands issued at sim
    time t affect poses strictly after t).
    """

    def __init__(self, world: World, spec: ScanSpec, graph: MessageGraph,
                 scheduler: EventScheduler, tick_hz: float = 20.0,
                 start_pose: RobotPose = RobotPose(),
                 odom_topic: str = "/odom", scan_topic: str = "/scan",
                 cmd_topic: str = "/cmd_vel"):
        if tick_hz <= 0:
            raise ValueError("tick_hz must be positive")
        if not world.contains(start_pose):
            raise ValueError("start pose outside world bounds")
        self.world = world
        self.spec = spec
        self.graph = graph
        self.scheduler = scheduler
        self.tick_hz = tick_hz
        self.pose = start_pose
        self._cmd = (0.0, 0.0)
        self._odom_pub = graph.advertise(TopicSpec(odom_topic, "nav/Odometry"))
        self._scan_pub = graph.advertise(TopicSpec(scan_topic, "sensor/LaserScan"))
        self._cmd_sub = graph.subscribe(cmd_topic, QueuePolicy(queue_length=1),
                                        callback=self._on_cmd)
        self.ticks = 0
        self.scans = 0
        self._stopped = False

    def _on_cmd(self, env) -> None:
        payload = env.payload or {}
        self._cmd = (float(payload.get("v", 0.0)), float(payload.get("omega", 0.0)))

    def start(self, duration_s: float) -> None:
        tick_ns = s_to_ns(1.0 / self.tick_hz)
        scan_ns = s_to_ns(1.0 / self.spec.rate_hz)
        end_ns = self.scheduler.clock.now_ns() + s_to_ns(duration_s)

        def tick():
            if self._stopped or self.scheduler.clock.now_ns() > end_ns:
                return
            v, omega = self._cmd
            self.pose = step_kinematics(self.pose, v, omega, 1.0 / self.tick_hz)
            self.ticks += 1
            self._odom_pub.publish({"x": self.pose.x, "y": self.pose.y,
                                    "theta": self.pose.theta, "v": v, "omega": omega})
            self.scheduler.schedule_in(tick_ns, tick, key=("robot-tick",))

        def scan():
            if self._stopped or self.scheduler.clock.now_ns() > end_ns:
                return
            ranges = render_scan(self.world, self.pose, self.spec)
            self.scans += 1
            self._scan_pub.publish({"ranges": ranges, "max_range": self.spec.max_range_m,
                                    "n_beams": self.spec.n_beams})
            self.scheduler.schedule_in(scan_ns, scan, key=("robot-scan",))

        self.scheduler.schedule_in(tick_ns, tick, key=("robot-tick",))
        self.scheduler.schedule_in(scan_ns, scan, key=("robot-scan",))

    def stop(self) -> None:
        self._stopped = True
        self._odom_pub.close()
        self._scan_pub.close()
        self._cmd_sub.close()


@dataclass(frozen=True)
class RtfSample:
    sim_advanced_ns: int
    wall_elapsed_ns: int

    @property
    def rtf(self) -> float:
        return self.sim_advanced_ns / self.wall_elapsed_ns


def _busy_wait(seconds: float) -> None:
    deadline = time.perf_counter() + seconds
    while time.perf_counter() < deadline:
        pass


def measure_rtf(tick_hz: float, duration_s: float,
                load_model: Optional[Callable[[int], float]] = None,
                window_s: float = 1.0) -> list[RtfSample]:
    """Run a real-time tick loop and sample RTF per wall-clock window.

    load_model(tick_index) returns seconds of compute to burn that tick; a
    tick whose load exceeds its budget makes sim time fall behind wall time
    and RTF drop below 1.0.
    """
    budget = 1.0 / tick_hz
    n_ticks = int(round(duration_s * tick_hz))
    samples: list[RtfSample] = []
    window_start_wall = time.monotonic_ns()
    window_start_sim = 0
    sim_ns = 0
    next_deadline = time.monotonic()
    for i in range(n_ticks):
        if load_model is not None:
            load = load_model(i)
            if load > 0:
                _busy_wait(load)
        sim_ns += s_to_ns(budget)
        next_deadline += budget
        remaining = next_deadline - time.monotonic()
        if remaining > 0:
            time.sleep(remaining)
        else:
            next_deadline = time.monotonic()  # behind schedule: don't catch up
        wall = time.monotonic_ns() - window_start_wall
        if wall >= s_to_ns(window_s):
            samples.append(RtfSample(sim_ns - window_start_sim, wall))
            window_start_wall = time.monotonic_ns()
            window_start_sim = sim_ns
    return samples
