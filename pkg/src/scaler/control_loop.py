"""Per-interval scaling loop: predict, detect a level change, act, learn."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from src.chain_analyzer import ChainAnalyzer, LabeledSample, NodeFeatures, critical_label
from src.cluster_sim import (
    ActionVector,
    ClusterState,
    IntervalMetrics,
    ScalingAction,
    action_space,
    step,
    to_scaling_action,
)
from src.errors import ConfigurationError, DomainError
from src.predictor import LevelForecaster
from src.scaler.agent import (
    ExperiencePool,
    QTable,
    RLState,
    Transition,
    latency_bucket,
    q_learning_update,
    sarsa_update,
    select_action,
)
from src.scaler.rewards import reward_rt, reward_total, reward_util
from src.settings import AgentConfig
from src.trace_ingest import LoadLevel, WorkloadTrace, level_series

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["interval", "arrived", "processed", "failed", "avg_rt_ms", "rps", "action_taken"]

BaselinePolicy = Callable[[ClusterState], Sequence[ScalingAction]]


class LoopMode(str, Enum):
    TRAIN = "train"
    EVALUATE = "evaluate"


@dataclass
class Agent:
    """Learning state carried across episodes."""

    config: AgentConfig
    q: QTable
    actions: list[ActionVector]
    pool: ExperiencePool
    epsilon: float

    @classmethod
    def from_config(
        cls, config: AgentConfig, q: QTable | None = None, actions: list[ActionVector] | None = None
    ) -> "Agent":
        if actions is None:
            actions = action_space(1, config.resource_types, config.h_range, config.v_range, cap=config.action_cap)
        if q is None:
            q = QTable(len(actions))
        elif q.n_actions != len(actions):
            raise ConfigurationError(f"Q table has {q.n_actions} actions, the action space has {len(actions)}")
        return cls(config, q, actions, ExperiencePool(config.pool_capacity), config.epsilon)

    def end_episode(self) -> None:
        self.epsilon *= self.config.epsilon_decay


@dataclass
class ControlLoopResult:
    metrics: list[IntervalMetrics] = field(default_factory=list)
    actions: list[str] = field(default_factory=list)
    q: QTable | None = None
    pool: ExperiencePool | None = None
    final_state: ClusterState | None = None
    decisions: int = 0
    updates: int = 0

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (m.interval, m.arrived, m.processed, m.failed, m.avg_response_time, m.rps, taken)
            for m, taken in zip(self.metrics, self.actions)
        ]
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def prepare_workload(
    trace: WorkloadTrace, T: int, num_levels: int, interval_seconds: float
) -> tuple[list[int], list[LoadLevel]]:
    """Per-interval arrival counts and load levels, cycling short traces."""
    if T < 1:
        raise DomainError("T must be >= 1")
    rates = np.asarray(trace.column("request_rate"), dtype=float)
    levels = level_series(trace, num_levels, column="request_rate")
    if len(rates) < T:
        logger.warning("trace has %d intervals, cycling it to fill %d", len(rates), T)
    idx = np.arange(T) % len(rates)
    arrivals = np.rint(rates[idx] * interval_seconds).astype(np.int64)
    return [int(a) for a in arrivals], [levels[i] for i in idx]


def _features(state: ClusterState) -> dict[str, NodeFeatures]:
    assert state.last is not None
    return {
        svc: NodeFeatures(snap.latency_ms, snap.cpu_util, snap.mem_util) for svc, snap in state.last.services.items()
    }


def _samples(metrics: IntervalMetrics, multiple: float) -> dict[str, LabeledSample]:
    return {
        svc: LabeledSample(
            NodeFeatures(snap.latency_ms, snap.cpu_util, snap.mem_util),
            critical_label(snap.queue_delay_ms, snap.service_time_ms, multiple),
        )
        for svc, snap in metrics.services.items()
    }


def _observe(
    state: ClusterState, analyzer: ChainAnalyzer, level: LoadLevel, config: AgentConfig
) -> tuple[RLState, str] | None:
    picked = analyzer.critical_node(_features(state))
    if picked is None or analyzer.chain is None:
        return None
    node, position = picked
    bucket = latency_bucket(analyzer.chain.total_latency, config.rt_max_ms, config.latency_buckets)
    return RLState(level.level, position, bucket), node


def run_control_loop(
    sim: ClusterState,
    trace: WorkloadTrace,
    agent: Agent,
    predictor: LevelForecaster,
    analyzer: ChainAnalyzer,
    T: int,
    mode: LoopMode | str = LoopMode.TRAIN,
    seed: int = 0,
) -> ControlLoopResult:
    """Drive ``sim`` through ``T`` intervals of ``trace``.

    A decision is taken only when the predicted level differs from the
    previous interval's level. In train mode the reward for a decision is
    measured at the end of the interval it was applied in, and the SARSA
    update for it runs at the next decision, once a' is known.
    """
    mode = LoopMode(mode)
    config = agent.config
    training = mode is LoopMode.TRAIN
    arrivals, levels = prepare_workload(trace, T, config.num_levels, sim.interval_seconds)

    thresholds = list(config.util_thresholds or sim.util_thresholds())
    if len(thresholds) != len(sim.machines):
        raise ConfigurationError(f"{len(thresholds)} utilization thresholds for {len(sim.machines)} machines")

    rng = np.random.default_rng(seed)
    epsilon = agent.epsilon if training else 0.0
    window = max(config.predictor_window, 1)
    result = ControlLoopResult(q=agent.q, pool=agent.pool)

    pending: tuple[RLState, int, float] | None = None
    last_refresh: int | None = None
    transitions = 0

    def learn(s_next: RLState, a_next: int) -> None:
        nonlocal transitions
        assert pending is not None
        s, a, reward = pending
        transition = Transition(s, a, reward, s_next, a_next)
        agent.pool.append(transition)
        transitions += 1
        if transitions % config.train_every:
            return
        if config.algorithm == "q_learning":
            q_learning_update(agent.q, s, a, reward, s_next, config.alpha, config.gamma)
        else:
            sarsa_update(agent.q, transition, config.alpha, config.gamma)
        result.updates += 1

    state = sim
    for t in range(T):
        action: ScalingAction | None = None
        decision: tuple[RLState, int] | None = None
        if t >= 1:
            predicted = predictor.predict_next(levels[max(0, t - window) : t])
            if predicted.level != levels[t - 1].level:
                if last_refresh is None or t - last_refresh >= config.chain_period:
                    analyzer.refresh_chain()
                    last_refresh = t
                observed = _observe(state, analyzer, predicted, config)
                if observed is not None:
                    s_t, target = observed
                    a_t = select_action(agent.q, s_t, len(agent.actions), epsilon, rng)
                    if training and pending is not None:
                        learn(s_t, a_t)
                    action = to_scaling_action(
                        agent.actions[a_t], target, config.h_range, config.cpu_step, config.mem_step
                    )
                    decision = (s_t, a_t)
                    result.decisions += 1
                    logger.debug("t=%d level %s->%s: %s", t, levels[t - 1].level, predicted.level, action.describe())

        state, metrics = step(state, arrivals[t], action)
        analyzer.observe(metrics.spans, _samples(metrics, config.critical_queue_multiple))

        if training and decision is not None:
            r_q = reward_rt(metrics.avg_response_time, config.rt_max_ms)
            r_u = reward_util(metrics.machine_utils, thresholds)
            pending = (decision[0], decision[1], reward_total(r_q, r_u))

        result.metrics.append(metrics)
        result.actions.append(action.describe() if action is not None else "")

    if training and pending is not None:
        final_level = predictor.predict_next(levels[max(0, T - window) :])
        observed = _observe(state, analyzer, final_level, config)
        if observed is not None:
            learn(observed[0], select_action(agent.q, observed[0], len(agent.actions), 0.0, rng))

    result.final_state = state
    logger.debug("%s run: %d decisions, %d updates over %d intervals", mode.value, result.decisions, result.updates, T)
    return result


def run_baseline_loop(
    sim: ClusterState,
    trace: WorkloadTrace,
    policy: BaselinePolicy | None,
    T: int,
    num_levels: int = 10,
) -> ControlLoopResult:
    """Drive ``sim`` with a rule-based policy (or none) queried every interval."""
    arrivals, _ = prepare_workload(trace, T, num_levels, sim.interval_seconds)
    result = ControlLoopResult()
    state = sim
    for t in range(T):
        actions = list(policy(state)) if policy is not None else []
        state, metrics = step(state, arrivals[t], actions)
        result.metrics.append(metrics)
        result.actions.append(";".join(a.describe() for a in actions))
        result.decisions += bool(actions)
    result.final_state = state
    return result
