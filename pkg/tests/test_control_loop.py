import numpy as np
import pytest

from src.chain_analyzer import ChainAnalyzer
from src.cluster_sim import init_cluster
from src.errors import ConfigurationError, DomainError
from src.predictor import fit
from src.scaler import (
    Agent,
    LoopMode,
    QTable,
    baseline_threshold,
    prepare_workload,
    run_baseline_loop,
    run_control_loop,
)
from src.scaler.control_loop import METRIC_COLUMNS
from src.settings import AgentConfig
from src.trace_ingest import level_series, synth_workload

T = 96


@pytest.fixture
def wave():
    return synth_workload("sinusoid", {"base": 40.0, "amplitude": 30.0, "period": 24.0}, horizon=T)


@pytest.fixture
def markov(wave):
    return fit(level_series(wave, 10, column="request_rate"), kind="markov")


def fresh(three_tier, machines, seed=0):
    return init_cluster(three_tier, machines, seed=seed, interval_seconds=1.0), ChainAnalyzer()


def test_prepare_workload_cycles_short_traces(caplog):
    trace = synth_workload("replay", {"rates": [1.0, 2.0, 3.0]}, horizon=3)
    with caplog.at_level("WARNING"):
        arrivals, levels = prepare_workload(trace, 7, 10, interval_seconds=10.0)
    assert arrivals == [10, 20, 30, 10, 20, 30, 10]
    assert [lv.level for lv in levels] == [3, 6, 9, 3, 6, 9, 3]
    assert "cycling" in caplog.text


def test_prepare_workload_rejects_empty_horizon(wave):
    with pytest.raises(DomainError):
        prepare_workload(wave, 0, 10, 60.0)


def test_constant_load_never_triggers_a_decision(three_tier, machines):
    trace = synth_workload("constant", {"rate": 30.0}, horizon=50)
    predictor = fit(level_series(trace, 10, column="request_rate"), kind="last_value")
    agent = Agent.from_config(AgentConfig())
    sim, analyzer = fresh(three_tier, machines)

    result = run_control_loop(sim, trace, agent, predictor, analyzer, T=50)
    assert result.decisions == 0
    assert result.updates == 0
    assert len(agent.pool) == 0
    assert len(agent.q) == 0
    assert set(result.actions) == {""}


def test_training_fills_pool_and_updates_q(three_tier, machines, wave, markov):
    agent = Agent.from_config(AgentConfig())
    sim, analyzer = fresh(three_tier, machines)

    result = run_control_loop(sim, wave, agent, markov, analyzer, T=T, mode="train", seed=3)
    assert result.decisions > 0
    assert len(agent.pool) >= result.decisions - 1
    assert result.updates == len(agent.pool)
    assert len(agent.q) > 0
    assert sum(1 for taken in result.actions if taken) == result.decisions
    assert len(result.metrics) == T


def test_train_every_thins_updates_but_not_the_pool(three_tier, machines, wave, markov):
    agent = Agent.from_config(AgentConfig(train_every=3))
    sim, analyzer = fresh(three_tier, machines)
    result = run_control_loop(sim, wave, agent, markov, analyzer, T=T, seed=3)
    assert result.updates == len(agent.pool) // 3


def test_q_learning_variant_learns_too(three_tier, machines, wave, markov):
    agent = Agent.from_config(AgentConfig(algorithm="q_learning"))
    sim, analyzer = fresh(three_tier, machines)
    result = run_control_loop(sim, wave, agent, markov, analyzer, T=T, seed=3)
    assert result.updates == len(agent.pool) > 0
    assert len(agent.q) > 0


def empirical_q_star(pool, gamma, sweeps=1_000):
    """Value iteration on the two-state problem read back from the pool:
    mean observed reward per (state, action), successors as observed."""
    rewards, successor = {}, {}
    for tr in pool:
        rewards.setdefault((tr.state, tr.action), []).append(tr.reward)
        successor[tr.state] = tr.next_state
    q = {pair: 0.0 for pair in rewards}
    for _ in range(sweeps):
        q = {
            (s, a): float(np.mean(r)) + gamma * max(v for (s2, _), v in q.items() if s2 == successor[s])
            for (s, a), r in rewards.items()
        }
    return q


def test_alternating_load_teaches_scale_up_at_the_high_level(single_service, machines):
    # 125 fresh episodes of low, high, low, high: 500 intervals in all
    trace = synth_workload("replay", {"rates": [30.0, 180.0]}, horizon=4)
    predictor = fit(level_series(trace, 10, column="request_rate"), kind="markov")
    config = AgentConfig(epsilon=0.2)
    agent = Agent.from_config(config, actions=[((0, 0),), ((1, 0),)])
    noop, up = 0, 1

    decisions = 0
    for episode in range(125):
        sim = init_cluster(single_service, machines, interval_seconds=1.0)
        result = run_control_loop(sim, trace, agent, predictor, ChainAnalyzer(), T=4, mode="train", seed=episode)
        decisions += result.decisions
    assert decisions == 125 * 3

    high = {tr.state for tr in agent.pool if tr.state.load_level == 9}
    assert len(high) == 1
    high = high.pop()
    assert agent.q.get(high, up) > agent.q.get(high, noop)

    oracle = empirical_q_star(agent.pool, config.gamma)
    assert oracle[(high, up)] > oracle[(high, noop)]


def test_evaluation_leaves_learning_state_untouched(three_tier, machines, wave, markov):
    agent = Agent.from_config(AgentConfig())
    sim, analyzer = fresh(three_tier, machines)
    run_control_loop(sim, wave, agent, markov, analyzer, T=T, mode=LoopMode.TRAIN)

    before, pool_size = agent.q.copy(), len(agent.pool)
    sim, analyzer = fresh(three_tier, machines)
    result = run_control_loop(sim, wave, agent, markov, analyzer, T=T, mode=LoopMode.EVALUATE)
    assert agent.q == before
    assert len(agent.pool) == pool_size
    assert result.updates == 0


def test_evaluation_is_deterministic(three_tier, machines, wave, markov):
    agent = Agent.from_config(AgentConfig())
    frames = []
    for _ in range(2):
        sim, analyzer = fresh(three_tier, machines)
        frames.append(run_control_loop(sim, wave, agent, markov, analyzer, T=T, mode="evaluate").to_frame())
    assert frames[0].equals(frames[1])
    assert list(frames[0].columns) == METRIC_COLUMNS


def test_threshold_count_must_match_machines(three_tier, machines, wave, markov):
    agent = Agent.from_config(AgentConfig(util_thresholds=[0.7, 0.7]))
    sim, analyzer = fresh(three_tier, machines)
    with pytest.raises(ConfigurationError):
        run_control_loop(sim, wave, agent, markov, analyzer, T=10)


def test_agent_rejects_mismatched_q_table():
    with pytest.raises(ConfigurationError):
        Agent.from_config(AgentConfig(), q=QTable(4))


def test_epsilon_decays_per_episode():
    agent = Agent.from_config(AgentConfig(epsilon=0.2, epsilon_decay=0.5))
    agent.end_episode()
    agent.end_episode()
    assert agent.epsilon == pytest.approx(0.05)


# -----------------------------
# Baseline loop
# -----------------------------
def test_baseline_loop_without_policy_takes_no_action(three_tier, machines, wave):
    sim, _ = fresh(three_tier, machines)
    result = run_baseline_loop(sim, wave, None, T=20)
    frame = result.to_frame()
    assert list(frame.columns) == METRIC_COLUMNS
    assert len(frame) == 20
    assert (frame["action_taken"] == "").all()
    assert result.decisions == 0


def test_baseline_loop_records_threshold_actions(single_service, machines):
    trace = synth_workload("constant", {"rate": 95.0}, horizon=5)
    sim = init_cluster(single_service, machines, interval_seconds=1.0)
    result = run_baseline_loop(sim, trace, baseline_threshold, T=5)
    assert result.actions[0] == ""
    assert result.actions[1] == "api:h=+1,cpu=+0,mem=+0"
    assert result.final_state.deployments["api"].replicas > 1
