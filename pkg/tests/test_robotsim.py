import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from shapely.geometry import LineString

from roboduct.clock import EventScheduler, ms_to_ns, s_to_ns
from roboduct.msggraph import MessageGraph, QueuePolicy, TopicSpec
from roboduct.robotsim import (
    RobotPose, RobotSim, ScanSpec, Segment, World, measure_rtf, normalize_angle,
    ray_segment_intersection, render_scan, square_room, step_kinematics,
)


# -- kinematics --------------------------------------------------------------

def test_normalize_angle():
    assert normalize_angle(0.0) == 0.0
    assert abs(normalize_angle(3 * math.pi) - math.pi) < 1e-12
    assert abs(normalize_angle(-3 * math.pi) - math.pi) < 1e-12
    assert abs(normalize_angle(2 * math.pi)) < 1e-12


def test_zero_velocity_is_identity():
    pose = RobotPose(1.0, 2.0, 0.5)
    out = step_kinematics(pose, 0.0, 0.0, 1.0)
    assert (out.x, out.y, out.theta) == (1.0, 2.0, 0.5)


def test_straight_line_motion():
    out = step_kinematics(RobotPose(0, 0, math.pi / 2), 2.0, 0.0, 1.5)
    assert abs(out.x) < 1e-12 and abs(out.y - 3.0) < 1e-12


def test_quarter_circle_arc():
    # v=1, omega=1 for dt=pi/2 drives a unit-radius quarter arc from the
    # origin facing +x: the exact endpoint is (1, 1) facing +y.
    out = step_kinematics(RobotPose(), 1.0, 1.0, math.pi / 2)
    assert abs(out.x - 1.0) < 1e-9
    assert abs(out.y - 1.0) < 1e-9
    assert abs(out.theta - math.pi / 2) < 1e-9


def test_dt_must_be_positive():
    with pytest.raises(ValueError):
        step_kinematics(RobotPose(), 1.0, 0.0, 0.0)


def euler_integrate(pose, v, omega, dt, n_sub=100_000):
    """Independent oracle: explicit Euler with n_sub substeps (vectorized).

    theta evolves independently of x/y, so the Euler sum collapses to a
    cumulative trig sum over the substep headings.
    """
    h = dt / n_sub
    thetas = pose.theta + omega * h * np.arange(n_sub)
    x = pose.x + v * h * float(np.sum(np.cos(thetas)))
    y = pose.y + v * h * float(np.sum(np.sin(thetas)))
    return x, y, pose.theta + omega * dt


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-math.pi, math.pi),
       st.floats(-2, 2), st.floats(-2, 2), st.floats(0.01, 1.0))
def test_arc_step_matches_euler_oracle(x, y, theta, v, omega, dt):
    pose = RobotPose(x, y, theta)
    out = step_kinematics(pose, v, omega, dt)
    ox, oy, otheta = euler_integrate(pose, v, omega, dt)
    assert abs(out.x - ox) < 1e-4
    assert abs(out.y - oy) < 1e-4
    assert abs(normalize_angle(out.theta - otheta)) < 1e-9


def test_composability():
    # One big step equals two half steps exactly (arcs compose).
    pose = RobotPose(0.3, -0.2, 0.7)
    whole = step_kinematics(pose, 0.8, 0.6, 1.0)
    half = step_kinematics(step_kinematics(pose, 0.8, 0.6, 0.5), 0.8, 0.6, 0.5)
    assert abs(whole.x - half.x) < 1e-12 and abs(whole.y - half.y) < 1e-12


# -- lidar -------------------------------------------------------------------

def test_empty_world_all_max_range():
    ranges = render_scan(World(), RobotPose(), ScanSpec(n_beams=36))
    assert ranges == [3.5] * 36


def test_single_wall_ahead():
    world = World([Segment(1.0, -10.0, 1.0, 10.0)])
    ranges = render_scan(world, RobotPose(), ScanSpec(n_beams=4, max_range_m=10.0))
    assert abs(ranges[0] - 1.0) < 1e-12       # facing the wall
    assert ranges[2] == 10.0                  # facing away


def test_square_room_axis_and_diagonal():
    # From the center of a 4 m room the walls sit at 2 m on-axis and at
    # 2*sqrt(2) m along the diagonals.
    ranges = render_scan(square_room(4.0), RobotPose(),
                         ScanSpec(n_beams=360, max_range_m=10.0))
    assert abs(ranges[0] - 2.0) < 1e-9
    assert abs(ranges[90] - 2.0) < 1e-9
    assert abs(ranges[45] - 2 * math.sqrt(2)) < 1e-9
    assert abs(ranges[135] - 2 * math.sqrt(2)) < 1e-9


def test_square_room_fourfold_symmetry():
    ranges = render_scan(square_room(4.0), RobotPose(),
                         ScanSpec(n_beams=360, max_range_m=10.0))
    for i in range(360):
        assert abs(ranges[i] - ranges[(i + 90) % 360]) < 1e-9


def test_max_range_clipping():
    world = World([Segment(5.0, -10.0, 5.0, 10.0)])
    ranges = render_scan(world, RobotPose(), ScanSpec(n_beams=1, max_range_m=3.5))
    assert ranges == [3.5]


def shapely_range(world, pose, angle, max_range):
    ray = LineString([(pose.x, pose.y),
                      (pose.x + 2 * max_range * math.cos(angle),
                       pose.y + 2 * max_range * math.sin(angle))])
    best = max_range
    for seg in world.segments:
        hit = ray.intersection(LineString([(seg.x1, seg.y1), (seg.x2, seg.y2)]))
        if hit.is_empty:
            continue
        for geom in getattr(hit, "geoms", [hit]):
            for px, py in geom.coords:
                d = math.hypot(px - pose.x, py - pose.y)
                best = min(best, d)
    return best


def test_random_worlds_match_shapely_oracle():
    rng = random.Random(11)
    spec = ScanSpec(n_beams=24, max_range_m=6.0)
    for _ in range(30):
        world = World([Segment(rng.uniform(-5, 5), rng.uniform(-5, 5),
                               rng.uniform(-5, 5), rng.uniform(-5, 5))
                       for _ in range(rng.randrange(1, 8))])
        pose = RobotPose(rng.uniform(-2, 2), rng.uniform(-2, 2),
                         rng.uniform(-math.pi, math.pi))
        ranges = render_scan(world, pose, spec)
        for i, r in enumerate(ranges):
            angle = pose.theta + i * spec.fov_rad / spec.n_beams
            assert abs(r - shapely_range(world, pose, angle, spec.max_range_m)) < 1e-6


def test_ray_misses_behind():
    assert ray_segment_intersection(0, 0, 1, 0, Segment(-1, -1, -1, 1)) is None


def test_world_from_file(tmp_path):
    p = tmp_path / "world.txt"
    p.write_text("# walls\n0 0 4 0\n4 0 4 4\n\n")
    world = World.from_file(str(p))
    assert len(world.segments) == 2
    assert world.bounds == (-1.0, -1.0, 5.0, 5.0)


# -- sim loop ----------------------------------------------------------------

def make_sim(tick_hz=10.0, world=None):
    sched = EventScheduler()
    graph = MessageGraph(clock=sched.clock)
    sim = RobotSim(world or square_room(40.0), ScanSpec(n_beams=8, rate_hz=5.0),
                   graph, sched, tick_hz=tick_hz)
    return sched, graph, sim


def test_odom_and_scan_rates():
    sched, graph, sim = make_sim(tick_hz=10.0)
    odoms, scans = [], []
    graph.subscribe("/odom", QueuePolicy(queue_length=1000),
                    callback=lambda env: odoms.append(env))
    graph.subscribe("/scan", QueuePolicy(queue_length=1000),
                    callback=lambda env: scans.append(env))
    sim.start(duration_s=2.0)
    sched.run_until(s_to_ns(3.0))
    assert len(odoms) == 20
    assert len(scans) == 10
    assert len(scans[0].payload["ranges"]) == 8


def test_command_applies_only_to_later_ticks():
    sched, graph, sim = make_sim(tick_hz=10.0)
    cmd = graph.advertise(TopicSpec("/cmd_vel", "geometry/Twist"))
    sim.start(duration_s=2.0)
    # Command lands at t=550 ms: ticks at 600..1000 ms see it, earlier ones
    # do not, so after 1 s the robot has moved exactly 5 ticks' worth.
    sched.schedule_in(ms_to_ns(550), lambda: cmd.publish({"v": 1.0, "omega": 0.0}))
    sched.run_until(s_to_ns(1.0))
    assert abs(sim.pose.x - 0.5) < 1e-9
    sched.schedule_in(0, lambda: cmd.publish({"v": 0.0, "omega": 0.0}))
    sched.run_until(s_to_ns(1.1))
    x_frozen = sim.pose.x
    sched.run_until(s_to_ns(2.5))
    assert sim.pose.x == x_frozen


def test_stop_halts_publishing():
    sched, graph, sim = make_sim()
    odoms = []
    graph.subscribe("/odom", QueuePolicy(queue_length=1000),
                    callback=lambda env: odoms.append(env))
    sim.start(duration_s=10.0)
    sched.run_until(s_to_ns(1.0))
    sim.stop()
    count = len(odoms)
    sched.run_until(s_to_ns(3.0))
    assert len(odoms) == count


# -- real-time factor --------------------------------------------------------

def test_rtf_near_one_without_load():
    samples = measure_rtf(tick_hz=100.0, duration_s=1.3)
    assert samples and all(s.rtf >= 0.9 for s in samples)


def test_rtf_drops_under_overload():
    budget = 1.0 / 100.0
    samples = measure_rtf(tick_hz=100.0, duration_s=1.3,
                          load_model=lambda i: 1.5 * budget)
    # Each tick takes >= 1.5 budgets of wall time, so RTF sits near 1/1.5.
    assert samples and all(s.rtf < 0.8 for s in samples)
    assert abs(samples[0].rtf - 1 / 1.5) < 0.12
