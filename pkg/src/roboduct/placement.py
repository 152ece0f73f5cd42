"""GPU session placement: pack sessions onto nodes under hard constraints.

Constraints: CPU and memory requests fit node capacity, every node taint is
tolerated by the session, and GPU nodes host at most two GPU sessions. The
two-session cap is enforced explicitly, not just via resource sizing, so
misconfigured requests can never violate it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import yaml

GPU_SESSIONS_PER_NODE_CAP = 2

POLICY_FIRST_FIT_DECREASING = "first_fit_decreasing"
POLICY_BEST_FIT = "best_fit"
POLICIES = (POLICY_FIRST_FIT_DECREASING, POLICY_BEST_FIT)

NO_TOLERATED_NODE = "NoToleratedNode"
INSUFFICIENT_CPU = "InsufficientCpu"
INSUFFICIENT_MEM = "InsufficientMem"
GPU_CAP_EXCEEDED = "GpuCapExceeded"


@dataclass(frozen=True)
class NodeSpec:
    name: str
    cpu_millis: int
    mem_mb: int
    gpus: int = 0
    taints: frozenset = frozenset()

    def __post_init__(self):
        if self.cpu_millis <= 0 or self.mem_mb <= 0:
            raise ValueError(f"node {self.name}: capacities must be positive")
        if self.gpus < 0:
            raise ValueError(f"node {self.name}: negative gpu count")
        object.__setattr__(self, "taints", frozenset(self.taints))


@dataclass(frozen=True)
class SessionSpec:
    name: str
    cpu_millis: int
    mem_mb: int
    needs_gpu: bool = False
    tolerations: frozenset = frozenset()

    def __post_init__(self):
        if self.cpu_millis <= 0 or self.mem_mb <= 0:
            raise ValueError(f"session {self.name}: requests must be positive")
        object.__setattr__(self, "tolerations", frozenset(self.tolerations))


@dataclass
class PlacementPlan:
    assignment: dict = field(default_factory=dict)  # session name -> node name
    unplaced: list = field(default_factory=list)    # [(session name, reason)]


class _NodeState:
    __slots__ = ("spec", "cpu_left", "mem_left", "gpu_sessions")

    def __init__(self, spec: NodeSpec):
        self.spec = spec
        self.cpu_left = spec.cpu_millis
        self.mem_left = spec.mem_mb
        self.gpu_sessions = 0


def _fit_failure(state: _NodeState, session: SessionSpec) -> Optional[str]:
    """First binding constraint this node fails for the session, or None."""
    if not state.spec.taints <= session.tolerations:
        return NO_TOLERATED_NODE
    if session.needs_gpu and (state.spec.gpus < 1
                              or state.gpu_sessions >= GPU_SESSIONS_PER_NODE_CAP):
        return GPU_CAP_EXCEEDED
    if session.cpu_millis > state.cpu_left:
        return INSUFFICIENT_CPU
    if session.mem_mb > state.mem_left:
        return INSUFFICIENT_MEM
    return None


_REASON_PRIORITY = (GPU_CAP_EXCEEDED, INSUFFICIENT_CPU, INSUFFICIENT_MEM, NO_TOLERATED_NODE)


def plan(nodes: list[NodeSpec], sessions: list[SessionSpec],
         policy: str = POLICY_FIRST_FIT_DECREASING) -> PlacementPlan:
    """Deterministic packing; infeasible sessions land in unplaced with a reason."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if len({n.name for n in nodes}) != len(nodes):
        raise ValueError("duplicate node names")
    if len({s.name for s in sessions}) != len(sessions):
        raise ValueError("duplicate session names")

    states = [_NodeState(n) for n in sorted(nodes, key=lambda n: n.name)]
    # Largest CPU request first; name breaks ties for determinism.
    ordered = sorted(sessions, key=lambda s: (-s.cpu_millis, -s.mem_mb, s.name))
    result = PlacementPlan()

    for session in ordered:
        candidates = []
        failures = []
        for state in states:
            failure = _fit_failure(state, session)
            if failure is None:
                candidates.append(state)
            else:
                failures.append(failure)
        if not candidates:
            reason = NO_TOLERATED_NODE
            for preferred in _REASON_PRIORITY:
                if preferred in failures:
                    reason = preferred
                    break
            result.unplaced.append((session.name, reason))
            continue
        if policy == POLICY_FIRST_FIT_DECREASING:
            chosen = candidates[0]
        else:  # best fit: tightest remaining cpu, then mem, then name
            chosen = min(candidates, key=lambda st: (st.cpu_left - session.cpu_millis,
                                                     st.mem_left - session.mem_mb,
                                                     st.spec.name))
        chosen.cpu_left -= session.cpu_millis
        chosen.mem_left -= session.mem_mb
        if session.needs_gpu:
            chosen.gpu_sessions += 1
        result.assignment[session.name] = chosen.spec.name

    result.unplaced.sort()
    return result


UNKNOWN_NODE = "UnknownNode"
UNKNOWN_SESSION = "UnknownSession"
CPU_OVERCOMMIT = "CpuOverCommit"
MEM_OVERCOMMIT = "MemOverCommit"
TAINT_NOT_TOLERATED = "TaintNotTolerated"


def verify(placement: PlacementPlan, nodes: list[NodeSpec],
           sessions: list[SessionSpec]) -> list[str]:
    """Independent constraint checker; empty list iff the plan is valid."""
    violations: list[str] = []
    node_by_name = {n.name: n for n in nodes}
    session_by_name = {s.name: s for s in sessions}

    per_node: dict[str, list[SessionSpec]] = {}
    for session_name, node_name in sorted(placement.assignment.items()):
        if node_name not in node_by_name:
            violations.append(f"{UNKNOWN_NODE}: {session_name} -> {node_name}")
            continue
        if session_name not in session_by_name:
            violations.append(f"{UNKNOWN_SESSION}: {session_name}")
            continue
        per_node.setdefault(node_name, []).append(session_by_name[session_name])

    for node_name, placed in sorted(per_node.items()):
        node = node_by_name[node_name]
        cpu = sum(s.cpu_millis for s in placed)
        mem = sum(s.mem_mb for s in placed)
        gpu_count = sum(1 for s in placed if s.needs_gpu)
        if cpu > node.cpu_millis:
            violations.append(f"{CPU_OVERCOMMIT}: {node_name} {cpu} > {node.cpu_millis}")
        if mem > node.mem_mb:
            violations.append(f"{MEM_OVERCOMMIT}: {node_name} {mem} > {node.mem_mb}")
        if gpu_count > 0 and node.gpus < 1:
            violations.append(f"{GPU_CAP_EXCEEDED}: {node_name} has no GPU")
        elif gpu_count > GPU_SESSIONS_PER_NODE_CAP:
            violations.append(f"{GPU_CAP_EXCEEDED}: {node_name} hosts {gpu_count}")
        for session in placed:
            if not node.taints <= session.tolerations:
                violations.append(f"{TAINT_NOT_TOLERATED}: {session.name} on {node_name}")
    return violations


def capacity_report(nodes: list[NodeSpec], template: SessionSpec) -> int:
    """Max count of identical sessions placeable, by plan-until-failure."""
    count = 0
    while True:
        batch = [SessionSpec(f"{template.name}-{i:04d}", template.cpu_millis,
                             template.mem_mb, template.needs_gpu, template.tolerations)
                 for i in range(count + 1)]
        result = plan(nodes, batch)
        if result.unplaced:
            return count
        count += 1


# -- file formats ------------------------------------------------------------

def load_nodes(path: str) -> list[NodeSpec]:
    with open(path, "r", encoding="utf-8") as fh:
        docs = yaml.safe_load(fh) or []
    return [NodeSpec(name=d["name"], cpu_millis=int(d["cpu_millis"]),
                     mem_mb=int(d["mem_mb"]), gpus=int(d.get("gpus", 0)),
                     taints=frozenset(d.get("taints", []))) for d in docs]


def load_sessions(path: str) -> list[SessionSpec]:
    with open(path, "r", encoding="utf-8") as fh:
        docs = yaml.safe_load(fh) or []
    return [SessionSpec(name=d["name"], cpu_millis=int(d["cpu_millis"]),
                        mem_mb=int(d["mem_mb"]), needs_gpu=bool(d.get("needs_gpu", False)),
                        tolerations=frozenset(d.get("tolerations", []))) for d in docs]
