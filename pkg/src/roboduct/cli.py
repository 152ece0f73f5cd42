"""Command-line entry points: bridged, ductd, placer, rapbench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import metrics, placement
from .bridge import BridgeCore, Route
from .clock import RealClock
from .duct import DuctClient, DuctConfig
from .msggraph import MessageGraph
from .transport_ws import BridgeWsServer, RealScheduler, ws_transport_factory


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _parse_route(text: str) -> Route:
    # name or name:isolated / name:shared
    if ":" in text:
        name, flag = text.split(":", 1)
        return Route(name, isolated=(flag != "shared"))
    return Route(text, isolated=True)


def bridged_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bridged", description="Cloud-side websocket bridge")
    parser.add_argument("--listen", default="0.0.0.0:8443", help="host:port (single port)")
    parser.add_argument("--route", action="append", default=[],
                        help="route name[:isolated|:shared]; repeatable")
    parser.add_argument("--token", action="append", default=[],
                        help="route=SECRET; repeatable")
    parser.add_argument("--tls-cert")
    parser.add_argument("--tls-key")
    parser.add_argument("--metrics-out", help="write connection stats JSON on shutdown")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)

    tokens = {}
    for item in args.token:
        route_name, _, secret = item.partition("=")
        tokens[route_name] = secret
    routes = []
    for item in (args.route or ["lab"]):
        route = _parse_route(item)
        routes.append(Route(route.name, route.isolated, tokens.get(route.name)))

    host, _, port = args.listen.rpartition(":")
    core = BridgeCore(routes, clock=RealClock())
    server = BridgeWsServer(core, host or "0.0.0.0", int(port),
                            tls_cert=args.tls_cert, tls_key=args.tls_key)
    print(f"bridged: serving routes {[r.path for r in routes]} on {args.listen}",
          file=sys.stderr)
    try:
        server.run_forever()
    except KeyboardInterrupt:
        pass
    if args.metrics_out:
        with open(args.metrics_out, "w", encoding="utf-8") as fh:
            json.dump({"connections": core.connection_ids()}, fh)
    return 0


def ductd_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ductd", description="Device-side duct client")
    parser.add_argument("--config", required=True, help="duct config file (YAML)")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)

    config = DuctConfig.from_file(args.config)
    graph = MessageGraph(clock=RealClock())
    scheduler = RealScheduler()
    url = config.server_url.rstrip("/") + config.path
    duct = DuctClient(config, graph, scheduler, ws_transport_factory(url))
    duct.start()
    print(f"ductd: mirroring to {url}", file=sys.stderr)
    try:
        import time
        while duct.phase != "stopped":
            time.sleep(0.5)
    except KeyboardInterrupt:
        duct.stop()
    if duct.auth_error is not None:
        print(f"ductd: {duct.auth_error}", file=sys.stderr)
        return 1
    return 0


def placer_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="placer", description="GPU session placement planner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan")
    p_plan.add_argument("--nodes", required=True)
    p_plan.add_argument("--sessions", required=True)
    p_plan.add_argument("--policy", default=placement.POLICY_FIRST_FIT_DECREASING,
                        choices=placement.POLICIES)

    p_verify = sub.add_parser("verify")
    p_verify.add_argument("--nodes", required=True)
    p_verify.add_argument("--sessions", required=True)
    p_verify.add_argument("--plan", required=True, help="JSON plan file")

    p_cap = sub.add_parser("capacity")
    p_cap.add_argument("--nodes", required=True)
    p_cap.add_argument("--sessions", required=True,
                       help="session file; the first entry is the template")

    args = parser.parse_args(argv)
    nodes = placement.load_nodes(args.nodes)
    sessions = placement.load_sessions(args.sessions)

    if args.command == "plan":
        result = placement.plan(nodes, sessions, args.policy)
        print(json.dumps({"assignment": result.assignment,
                          "unplaced": result.unplaced}, sort_keys=True, indent=2))
        return 0
    if args.command == "verify":
        with open(args.plan, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        result = placement.PlacementPlan(assignment=raw.get("assignment", {}),
                                         unplaced=[tuple(u) for u in raw.get("unplaced", [])])
        violations = placement.verify(result, nodes, sessions)
        for violation in violations:
            print(violation)
        return 1 if violations else 0
    if args.command == "capacity":
        if not sessions:
            parser.error("capacity requires at least one template session")
        print(placement.capacity_report(nodes, sessions[0]))
        return 0
    return 2


def rapbench_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rapbench", description="Scenario benchmark runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run")
    p_run.add_argument("--scenario", required=True, help="scenario file (YAML)")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--encoding", choices=("json", "cbor"))
    p_run.add_argument("--out", help="output directory for report files")

    p_cmp = sub.add_parser("compare")
    p_cmp.add_argument("report_a")
    p_cmp.add_argument("report_b")

    args = parser.parse_args(argv)

    if args.command == "run":
        scenario = metrics.ScenarioSpec.from_file(args.scenario)
        if args.seed is not None:
            scenario.seed = args.seed
        if args.encoding is not None:
            scenario.encoding = args.encoding
        report = metrics.run(scenario)
        print(report.table())
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            out_path = os.path.join(args.out,
                                    f"{scenario.name}-{scenario.encoding}-{scenario.seed}.json")
            with open(out_path, "w", encoding="utf-8") as fh:
                fh.write(report.to_json() + "\n")
            print(f"report written to {out_path}", file=sys.stderr)
        return 0 if report.conservation_ok() else 1
    if args.command == "compare":
        with open(args.report_a, "r", encoding="utf-8") as fh:
            report_a = metrics.RunReport.from_dict(json.load(fh))
        with open(args.report_b, "r", encoding="utf-8") as fh:
            report_b = metrics.RunReport.from_dict(json.load(fh))
        print(json.dumps(metrics.compare(report_a, report_b), sort_keys=True, indent=2))
        return 0
    return 2
