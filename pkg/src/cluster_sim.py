"""Interval-synchronous simulation of a microservice cluster.

Each interval: scaling actions are applied, external arrivals enter the
root services, and every deployment (in topological order) serves
``min(queued + incoming, capacity)`` requests, forwards calls to its
children by branch probability and drops whatever overflows its queue.
"""

from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np

from src.chain_analyzer import CallGraph, Span
from src.errors import ActionSpaceTooLargeError, ConfigurationError, CyclicGraphError, DomainError
from src.settings import MachinesConfig, TopologyConfig

logger = logging.getLogger(__name__)

RESOURCE_TYPES = ("cpu", "mem")
DEFAULT_ACTION_CAP = 10_000

# share of a replica's allocation consumed while idle
IDLE_CPU_FRACTION = 0.05
IDLE_MEM_FRACTION = 0.5


@dataclass
class Machine:
    id: int
    cpu_cores: float
    memory: float
    util_threshold: float
    cpu_util: float = 0.0
    mem_util: float = 0.0

    @property
    def util(self) -> float:
        """u_k: the binding (highest) resource utilization."""
        return max(self.cpu_util, self.mem_util)


@dataclass
class ServiceDeployment:
    service: str
    machine: int
    replicas: int
    max_replicas: int
    cpu_per_replica: float
    mem_per_replica: float
    reference_cpu: float
    reference_mem: float
    min_cpu: float
    min_mem: float
    base_service_time: float
    per_replica_rate: float
    queue_capacity: int
    queue: int = 0

    @property
    def allocation_factor(self) -> float:
        return self.cpu_per_replica / self.reference_cpu

    @property
    def memory_factor(self) -> float:
        return min(1.0, self.mem_per_replica / self.reference_mem)

    @property
    def effective_rate(self) -> float:
        return self.per_replica_rate * self.allocation_factor * self.memory_factor

    @property
    def capacity(self) -> int:
        return int(math.floor(self.replicas * self.effective_rate + 1e-9))

    @property
    def service_time_ms(self) -> float:
        return self.base_service_time / self.allocation_factor


@dataclass(frozen=True)
class ScalingAction:
    """Hybrid action on one deployment: ``h`` replicas, ``v_*`` vertical steps."""

    target: str
    h: int = 0
    v_cpu: int = 0
    v_mem: int = 0
    cpu_step: float = 0.5
    mem_step: float = 256.0

    def describe(self) -> str:
        return f"{self.target}:h={self.h:+d},cpu={self.v_cpu:+d},mem={self.v_mem:+d}"


@dataclass(frozen=True)
class ServiceSnapshot:
    service: str
    replicas: int
    cpu_per_replica: float
    mem_per_replica: float
    incoming: int
    processed: int
    failed: int
    queue: int
    service_time_ms: float
    queue_delay_ms: float
    latency_ms: float
    cpu_util: float
    mem_util: float
    # per-replica cores needed to serve everything offered this interval
    demand_cores: float


@dataclass(frozen=True)
class IntervalMetrics:
    interval: int
    external_arrivals: int
    arrived: int
    processed: int
    failed: int
    queued_before: int
    queued_after: int
    avg_response_time: float
    rps: float
    services: Mapping[str, ServiceSnapshot]
    machine_utils: tuple[float, ...]
    spans: tuple[Span, ...] = ()


@dataclass
class ClusterState:
    machines: list[Machine]
    deployments: dict[str, ServiceDeployment]
    edges: Mapping[str, tuple[tuple[str, float], ...]]
    order: tuple[str, ...]
    roots: tuple[str, ...]
    interval_seconds: float
    rng: np.random.Generator
    latency_jitter: float = 0.0
    interval: int = 0
    carry: dict[tuple[str, str], float] = field(default_factory=dict)
    last: IntervalMetrics | None = None

    def clone(self) -> "ClusterState":
        return replace(
            self,
            machines=[replace(m) for m in self.machines],
            deployments={k: replace(d) for k, d in self.deployments.items()},
            carry=dict(self.carry),
            rng=copy.deepcopy(self.rng),
        )

    def total_queue(self) -> int:
        return sum(d.queue for d in self.deployments.values())

    def machine_utils(self) -> list[float]:
        return [m.util for m in self.machines]

    def util_thresholds(self) -> list[float]:
        return [m.util_threshold for m in self.machines]

    def _allocated(self, machine: int, skip: str | None = None) -> tuple[float, float]:
        cpu = mem = 0.0
        for d in self.deployments.values():
            if d.machine == machine and d.service != skip:
                cpu += d.replicas * d.cpu_per_replica
                mem += d.replicas * d.mem_per_replica
        return cpu, mem


# -----------------------------
# Construction
# -----------------------------
def init_cluster(
    topology: TopologyConfig,
    machines: MachinesConfig,
    seed: int = 0,
    interval_seconds: float = 60.0,
    latency_jitter: float = 0.0,
) -> ClusterState:
    if not interval_seconds > 0:
        raise ConfigurationError("interval_seconds must be positive")
    machine_list = [
        Machine(id=m.id, cpu_cores=m.cpu_cores, memory=m.memory, util_threshold=m.util_threshold)
        for m in machines.machines
    ]

    edges = [(e.source, e.target, e.branch_probability) for e in topology.edges]
    try:
        graph = CallGraph.from_edges(((s, t, 0.0) for s, t, _ in edges), nodes=(s.id for s in topology.services))
    except CyclicGraphError as exc:
        raise ConfigurationError(f"topology is not acyclic: {exc}") from exc
    order = tuple(nx.lexicographical_topological_sort(graph.to_networkx()))

    deployments: dict[str, ServiceDeployment] = {}
    for service_id in order:
        spec = topology.service(service_id)
        if spec.machine >= len(machine_list):
            raise ConfigurationError(f"service {spec.id!r} placed on unknown machine {spec.machine}")
        deployments[service_id] = ServiceDeployment(
            service=spec.id,
            machine=spec.machine,
            replicas=spec.replicas,
            max_replicas=spec.max_replicas,
            cpu_per_replica=spec.cpu_per_replica,
            mem_per_replica=spec.mem_per_replica,
            reference_cpu=spec.ref_cpu,
            reference_mem=spec.ref_mem,
            min_cpu=spec.min_cpu,
            min_mem=spec.min_mem,
            base_service_time=spec.base_service_time_ms,
            per_replica_rate=spec.per_replica_rate,
            queue_capacity=spec.queue_capacity,
        )

    children: dict[str, list[tuple[str, float]]] = {s: [] for s in order}
    for src, dst, p in sorted(edges):
        children[src].append((dst, p))

    state = ClusterState(
        machines=machine_list,
        deployments=deployments,
        edges={k: tuple(v) for k, v in children.items()},
        order=order,
        roots=tuple(graph.roots),
        interval_seconds=float(interval_seconds),
        rng=np.random.default_rng(seed),
        latency_jitter=latency_jitter,
        carry={(src, dst): 0.0 for src, dst, _ in edges},
    )

    for machine in state.machines:
        cpu, mem = state._allocated(machine.id)
        if cpu > machine.cpu_cores + 1e-9 or mem > machine.memory + 1e-9:
            raise ConfigurationError(
                f"machine {machine.id} over-committed: {cpu:g}/{machine.cpu_cores:g} cores, "
                f"{mem:g}/{machine.memory:g} memory"
            )
    _update_utilization(state, {s: 0.0 for s in order})
    return state


# -----------------------------
# Actions
# -----------------------------
def _apply_inplace(state: ClusterState, action: ScalingAction) -> None:
    d = state.deployments.get(action.target)
    if d is None:
        raise DomainError(f"scaling action targets unknown service {action.target!r}")
    machine = state.machines[d.machine]
    other_cpu, other_mem = state._allocated(d.machine, skip=d.service)

    if action.h:
        replicas = min(max(d.replicas + action.h, 1), d.max_replicas)
        if action.h > 0:
            fit = min(
                math.floor((machine.cpu_cores - other_cpu) / d.cpu_per_replica + 1e-9),
                math.floor((machine.memory - other_mem) / d.mem_per_replica + 1e-9),
            )
            replicas = min(replicas, max(d.replicas, fit))
        d.replicas = replicas

    if action.v_cpu:
        ceiling = max(d.min_cpu, (machine.cpu_cores - other_cpu) / d.replicas)
        d.cpu_per_replica = min(max(d.cpu_per_replica + action.v_cpu * action.cpu_step, d.min_cpu), ceiling)
    if action.v_mem:
        ceiling = max(d.min_mem, (machine.memory - other_mem) / d.replicas)
        d.mem_per_replica = min(max(d.mem_per_replica + action.v_mem * action.mem_step, d.min_mem), ceiling)


def apply_action(state: ClusterState, action: ScalingAction) -> ClusterState:
    """Return a copy of ``state`` with ``action`` applied; out-of-range
    requests are clamped to [1, max_replicas], the minimum allocation and
    the machine's headroom."""
    new_state = state.clone()
    _apply_inplace(new_state, action)
    return new_state


def _zero_first(bound: int) -> list[int]:
    values = [0]
    for k in range(1, bound + 1):
        values.extend((k, -k))
    return values


ActionVector = tuple[tuple[int, int], ...]


def action_space(K: int, I: int, n: int, m: int, cap: int = DEFAULT_ACTION_CAP) -> list[ActionVector]:
    """Enumerate the Cartesian product of (h, v) sub-actions over K×I slots.

    Odometer order with slot 0 turning fastest; each digit runs over
    ``0, +1, -1, +2, -2, ...`` so index 0 is always the no-op.
    """
    if K < 1 or I < 1:
        raise DomainError("K and I must be >= 1")
    if n < 0 or m < 0:
        raise DomainError("n and m must be >= 0")
    size = ((2 * n + 1) * (2 * m + 1)) ** (K * I)
    if size > cap:
        raise ActionSpaceTooLargeError(size, cap)
    digits = [(h, v) for v in _zero_first(m) for h in _zero_first(n)]
    return [tuple(reversed(combo)) for combo in itertools.product(digits, repeat=K * I)]


def to_scaling_action(
    vector: ActionVector, target: str, n: int, cpu_step: float = 0.5, mem_step: float = 256.0
) -> ScalingAction:
    """Collapse a single-deployment action vector (K = 1) into a ScalingAction.

    Slot i carries resource ``RESOURCE_TYPES[i]``; the horizontal parts of
    all slots add up and are clamped to [-n, n].
    """
    h = max(-n, min(n, sum(slot[0] for slot in vector)))
    v_cpu = vector[0][1] if len(vector) > 0 else 0
    v_mem = vector[1][1] if len(vector) > 1 else 0
    return ScalingAction(target=target, h=h, v_cpu=v_cpu, v_mem=v_mem, cpu_step=cpu_step, mem_step=mem_step)


# -----------------------------
# Stepping
# -----------------------------
def _update_utilization(state: ClusterState, busy: Mapping[str, float]) -> None:
    cpu_used = [0.0] * len(state.machines)
    mem_used = [0.0] * len(state.machines)
    for d in state.deployments.values():
        b = busy.get(d.service, 0.0)
        cpu_used[d.machine] += d.replicas * d.cpu_per_replica * (IDLE_CPU_FRACTION + (1 - IDLE_CPU_FRACTION) * b)
        mem_used[d.machine] += d.replicas * d.mem_per_replica * (IDLE_MEM_FRACTION + (1 - IDLE_MEM_FRACTION) * b)
    for machine in state.machines:
        machine.cpu_util = min(1.0, cpu_used[machine.id] / machine.cpu_cores)
        machine.mem_util = min(1.0, mem_used[machine.id] / machine.memory)


def _as_actions(action: ScalingAction | Iterable[ScalingAction] | None) -> list[ScalingAction]:
    if action is None:
        return []
    if isinstance(action, ScalingAction):
        return [action]
    return list(action)


def step(
    state: ClusterState,
    arrivals: int,
    action: ScalingAction | Sequence[ScalingAction] | None = None,
) -> tuple[ClusterState, IntervalMetrics]:
    if arrivals < 0:
        raise DomainError("arrivals must be >= 0")
    s = state.clone()
    for a in _as_actions(action):
        _apply_inplace(s, a)

    interval_ms = s.interval_seconds * 1000.0
    incoming = {svc: 0 for svc in s.order}
    external = {root: arrivals // len(s.roots) for root in s.roots}
    for root in s.roots[: arrivals % len(s.roots)]:
        external[root] += 1
    for root, count in external.items():
        incoming[root] += count

    queued_before = s.total_queue()
    snapshots: dict[str, ServiceSnapshot] = {}
    busy: dict[str, float] = {}
    sent: dict[tuple[str, str], int] = {}

    for svc in s.order:
        d = s.deployments[svc]
        available = d.queue + incoming[svc]
        cap = d.capacity
        done = min(available, cap)
        remaining = available - done
        queued = min(remaining, d.queue_capacity)
        failed = remaining - queued
        d.queue = queued

        busy[svc] = done / cap if cap > 0 else (1.0 if available > 0 else 0.0)
        queue_delay = queued / max(cap, 1) * interval_ms
        service_time = d.service_time_ms
        demand = available / (d.replicas * d.per_replica_rate * d.memory_factor) * d.reference_cpu

        for child, p in s.edges[svc]:
            x = done * p + s.carry[(svc, child)]
            forwarded = int(math.floor(x))
            s.carry[(svc, child)] = x - forwarded
            sent[(svc, child)] = forwarded
            incoming[child] += forwarded

        snapshots[svc] = ServiceSnapshot(
            service=svc,
            replicas=d.replicas,
            cpu_per_replica=d.cpu_per_replica,
            mem_per_replica=d.mem_per_replica,
            incoming=incoming[svc],
            processed=done,
            failed=failed,
            queue=queued,
            service_time_ms=service_time,
            queue_delay_ms=queue_delay,
            latency_ms=service_time + queue_delay,
            cpu_util=busy[svc],
            mem_util=IDLE_MEM_FRACTION + (1 - IDLE_MEM_FRACTION) * busy[svc],
            demand_cores=demand,
        )

    # expected end-to-end time: own latency plus the probability-weighted
    # downstream calls, made sequentially
    response: dict[str, float] = {}
    for svc in reversed(s.order):
        response[svc] = snapshots[svc].latency_ms + sum(p * response[c] for c, p in s.edges[svc])
    total_external = sum(external.values())
    avg_rt = sum(external[r] * response[r] for r in s.roots) / total_external if total_external else 0.0

    spans = _emit_spans(s, external, sent, snapshots)
    _update_utilization(s, busy)

    arrived = sum(snap.incoming for snap in snapshots.values())
    processed = sum(snap.processed for snap in snapshots.values())
    metrics = IntervalMetrics(
        interval=s.interval,
        external_arrivals=arrivals,
        arrived=arrived,
        processed=processed,
        failed=sum(snap.failed for snap in snapshots.values()),
        queued_before=queued_before,
        queued_after=s.total_queue(),
        avg_response_time=avg_rt,
        rps=processed / s.interval_seconds,
        services=snapshots,
        machine_utils=tuple(s.machine_utils()),
        spans=spans,
    )
    s.interval += 1
    s.last = metrics
    return s, metrics


def _emit_spans(
    s: ClusterState,
    external: Mapping[str, int],
    sent: Mapping[tuple[str, str], int],
    snapshots: Mapping[str, ServiceSnapshot],
) -> tuple[Span, ...]:
    """One aggregate span per root and per edge that carried calls."""
    trace_id = f"interval-{s.interval}"

    def observed(svc: str) -> float:
        latency = snapshots[svc].latency_ms
        if s.latency_jitter > 0:
            latency *= float(s.rng.lognormal(0.0, s.latency_jitter))
        return latency

    spans = [Span(trace_id, None, root, observed(root)) for root in s.roots if external[root] > 0]
    spans.extend(Span(trace_id, src, dst, observed(dst)) for (src, dst), n in sorted(sent.items()) if n > 0)
    return tuple(spans)
