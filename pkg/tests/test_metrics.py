import pytest

from roboduct.metrics import RunReport, ScenarioInvalid, ScenarioSpec, compare, run
from roboduct.netsim import LinkProfile
from roboduct.robotsim import ScanSpec


def nav_scenario(**kw):
    defaults = dict(name="nav-test", traffic="nav", duration_s=10.0, seed=1,
                    scan=ScanSpec(n_beams=16, rate_hz=5.0), tick_hz=20.0)
    defaults.update(kw)
    return ScenarioSpec(**defaults)


def test_perfect_link_conserves_and_hits_scan_rate():
    report = run(nav_scenario(link=LinkProfile()))
    assert report.conservation_ok()
    for stats in report.topics.values():
        assert stats.lost_disconnect == 0 and stats.dropped_queue == 0
        assert stats.sent == stats.delivered
    assert abs(report.delivered_scan_fps - 5.0) <= 0.02 * 5.0
    assert report.reconnects == 0 and report.downtime_ms == 0.0


def test_latency_percentiles_equal_link_latency():
    report = run(nav_scenario(link=LinkProfile(one_way_latency_ms=50.0)))
    assert report.latency_p50_ms == pytest.approx(50.0, abs=1e-6)
    assert report.latency_p99_ms == pytest.approx(50.0, abs=1e-6)


def test_latency_p99_bounded_by_jitter():
    report = run(nav_scenario(link=LinkProfile(one_way_latency_ms=50.0, jitter_ms=20.0)))
    assert 30.0 - 1e-6 <= report.latency_p50_ms <= 70.0 + 1e-6
    assert report.latency_p99_ms <= 70.0 + 1e-6


def test_identical_runs_identical_reports():
    scenario = nav_scenario(link=LinkProfile(one_way_latency_ms=30, jitter_ms=10,
                                             drop_prob=0.05), seed=7)
    a = run(scenario)
    b = run(scenario)
    assert a.to_json() == b.to_json()


def test_lossy_link_still_balances():
    report = run(nav_scenario(link=LinkProfile(one_way_latency_ms=20, drop_prob=0.3),
                              seed=3))
    assert report.conservation_ok()
    assert any(s.dropped_queue > 0 for s in report.topics.values())


def test_periodic_outages_reconnects_and_balance():
    # Link dies every 2 s for 0.5 s across 20 s: eight outages, so eight
    # reconnects when the counter resets only after a long stable stretch.
    schedule = [(2000 + 2500 * i, 500) for i in range(8)]
    report = run(nav_scenario(duration_s=20.0,
                              link=LinkProfile(one_way_latency_ms=10,
                                               disconnect_schedule=schedule)))
    assert report.conservation_ok()
    assert abs(report.reconnects - 8) <= 1
    assert report.downtime_ms >= 8 * 500
    # Traffic generated during outages is accounted for, not silently gone.
    accounted = sum(s.lost_disconnect + s.dropped_queue + s.delivered
                    for s in report.topics.values())
    assert accounted == sum(s.sent for s in report.topics.values())


def test_scan_throttle_counts_as_dropped():
    report = run(nav_scenario(scan_throttle_ms=500))
    assert report.conservation_ok()
    scan = report.topics["/scan"]
    assert scan.dropped_queue > 0
    assert report.delivered_scan_fps <= 2.0 + 0.1


def test_bulk_cbor_under_sixty_percent_of_json():
    base = dict(name="bulk-test", traffic="bulk", duration_s=5.0, seed=2,
                bulk_payload_bytes=65_536, bulk_rate_hz=2.0)
    report_json = run(ScenarioSpec(encoding="json", **base))
    report_cbor = run(ScenarioSpec(encoding="cbor", **base))
    deltas = compare(report_json, report_cbor)
    assert deltas["bytes_ratio"] < 0.60
    assert report_json.conservation_ok() and report_cbor.conservation_ok()
    # Same payload stream delivered either way.
    assert deltas["topics"]["/blob"]["delivered"] == 0


def test_compare_same_run_is_all_zero():
    scenario = nav_scenario(seed=5)
    deltas = compare(run(scenario), run(scenario))
    assert deltas["bytes_ratio"] == 1.0
    assert deltas["latency_p50_ms"] == 0.0
    assert all(v == 0 for t in deltas["topics"].values() for v in t.values())


def test_compare_rejects_mismatched_runs():
    a = RunReport(scenario="x", seed=1, encoding="json", duration_s=1)
    b = RunReport(scenario="x", seed=2, encoding="json", duration_s=1)
    with pytest.raises(ScenarioInvalid):
        compare(a, b)


def test_report_json_round_trip():
    report = run(nav_scenario(duration_s=2.0))
    import json
    clone = RunReport.from_dict(json.loads(report.to_json()))
    assert clone.to_json() == report.to_json()
    assert "scenario" in report.table()


def test_scenario_from_yaml(tmp_path):
    p = tmp_path / "scenario.yaml"
    p.write_text(
        "name: lossy\n"
        "traffic: nav\n"
        "duration_s: 3\n"
        "seed: 9\n"
        "encoding: json\n"
        "link: {one_way_latency_ms: 25, drop_prob: 0.1}\n"
        "scan: {n_beams: 8, rate_hz: 5}\n"
        "world: 6.0\n")
    spec = ScenarioSpec.from_file(str(p))
    assert spec.link.one_way_latency_ms == 25
    report = run(spec)
    assert report.scenario == "lossy" and report.conservation_ok()


def test_invalid_scenarios_rejected():
    with pytest.raises(ScenarioInvalid):
        ScenarioSpec(name="x", duration_s=0).validate()
    with pytest.raises(ScenarioInvalid):
        ScenarioSpec(name="x", traffic="video").validate()
    with pytest.raises(ScenarioInvalid):
        ScenarioSpec(name="x", encoding="xml").validate()
