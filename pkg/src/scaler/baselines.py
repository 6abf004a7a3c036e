"""Reference autoscalers the learned policy is compared against.

``baseline_threshold`` is the Kubernetes-HPA style rule on busy CPU.
``baseline_hybrid`` follows the Autopilot idea: vertical sizing from the
recent peak demand plus a safety margin, horizontal only when the vertical
step alone cannot close the gap.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from typing import Mapping, Sequence

from src.cluster_sim import ClusterState, ScalingAction
from src.errors import DomainError


def threshold_decision(util: float, replicas: int, threshold: float = 0.7) -> int:
    """+1 above the threshold, -1 below half of it (never under one replica)."""
    if util > threshold:
        return 1
    if util < threshold / 2 and replicas > 1:
        return -1
    return 0


def baseline_threshold(state: ClusterState, cpu_threshold: float = 0.7) -> list[ScalingAction]:
    if not 0.0 < cpu_threshold < 1.0:
        raise DomainError("cpu_threshold must lie in (0, 1)")
    if state.last is None:
        return []
    actions = []
    for service in state.order:
        snap = state.last.services[service]
        h = threshold_decision(snap.cpu_util, state.deployments[service].replicas, cpu_threshold)
        if h:
            actions.append(ScalingAction(target=service, h=h))
    return actions


def hybrid_decision(
    peak_demand: float,
    allocation: float,
    replicas: int,
    max_allocation: float,
    margin: float = 0.15,
    step: float = 0.5,
    m: int = 2,
) -> tuple[int, int]:
    """Return (h, v) for one deployment.

    ``peak_demand`` and ``allocation`` are per-replica cores;
    ``max_allocation`` is what the machine could still give each replica.
    """
    target = peak_demand * (1.0 + margin)
    if target > allocation + step / 2:
        needed = math.ceil((target - allocation) / step - 1e-9)
        room = max(0, math.floor((max_allocation - allocation) / step + 1e-9))
        v = min(needed, m, room)
        return (1 if needed > v else 0), v
    if replicas > 1 and peak_demand * replicas * (1.0 + margin) <= (replicas - 1) * allocation:
        return -1, 0
    if target < allocation - step:
        return 0, -min(math.floor((allocation - target) / step + 1e-9), m)
    return 0, 0


def baseline_hybrid(
    state: ClusterState,
    history: Mapping[str, Sequence[float]],
    margin: float = 0.15,
    cpu_step: float = 0.5,
    m: int = 2,
) -> list[ScalingAction]:
    """One hybrid decision per deployment.

    ``history`` holds each service's recent total demand in cores; it is
    spread over the current replicas before sizing.
    """
    if not any(history.get(service) for service in state.order):
        raise DomainError("hybrid baseline needs a non-empty demand history")
    actions = []
    for service in state.order:
        window = history.get(service)
        if not window:
            continue
        d = state.deployments[service]
        other_cpu, _ = state._allocated(d.machine, skip=service)
        max_allocation = (state.machines[d.machine].cpu_cores - other_cpu) / d.replicas
        peak = max(window) / d.replicas
        h, v = hybrid_decision(peak, d.cpu_per_replica, d.replicas, max_allocation, margin, cpu_step, m)
        if h or v:
            actions.append(ScalingAction(target=service, h=h, v_cpu=v, cpu_step=cpu_step))
    return actions


class HybridAutoscaler:
    """Keeps the per-service demand windows between decisions."""

    def __init__(self, margin: float = 0.15, window: int = 48, cpu_step: float = 0.5, m: int = 2):
        if window < 1:
            raise DomainError("window must be >= 1")
        self.margin = margin
        self.cpu_step = cpu_step
        self.m = m
        self.history: dict[str, deque[float]] = defaultdict(lambda: deque(maxlen=window))

    def __call__(self, state: ClusterState) -> list[ScalingAction]:
        if state.last is None:
            return []
        for service, snap in state.last.services.items():
            self.history[service].append(snap.demand_cores * snap.replicas)
        return baseline_hybrid(state, self.history, self.margin, self.cpu_step, self.m)
