import numpy as np
import pytest
from conftest import make_machines, make_topology

from src.cluster_sim import (
    IDLE_CPU_FRACTION,
    IDLE_MEM_FRACTION,
    ScalingAction,
    action_space,
    apply_action,
    init_cluster,
    step,
    to_scaling_action,
)
from src.errors import ActionSpaceTooLargeError, ConfigurationError, DomainError
from src.settings import load_machines, load_topology


def random_topology(rng):
    n = int(rng.integers(1, 7))
    names = [f"s{i}" for i in range(n)]
    services = [
        (
            name,
            float(rng.uniform(5, 50)),
            float(rng.integers(5, 200)),
            {"replicas": int(rng.integers(1, 3)), "max_replicas": 4, "queue_capacity": int(rng.integers(0, 300))},
        )
        for name in names
    ]
    edges = [
        (names[i], names[j], float(rng.uniform(0, 1)))
        for i in range(n)
        for j in range(i + 1, n)
        if rng.random() < 0.4
    ]
    return make_topology(services, edges)


# -----------------------------
# init_cluster
# -----------------------------
def test_init_single_service(single_service, machines):
    state = init_cluster(single_service, machines)
    assert state.deployments["api"].queue == 0
    assert state.roots == ("api",)
    expected_cpu = IDLE_CPU_FRACTION * 1.0 / 8.0
    expected_mem = IDLE_MEM_FRACTION * 512.0 / 16384.0
    assert state.machines[0].cpu_util == pytest.approx(expected_cpu)
    assert state.machines[0].mem_util == pytest.approx(expected_mem)
    assert state.machine_utils() == [pytest.approx(max(expected_cpu, expected_mem))]


def test_init_rejects_over_committed_machine():
    topology = make_topology([("big", 10.0, 100.0, {"cpu_per_replica": 100.0})])
    with pytest.raises(ConfigurationError):
        init_cluster(topology, make_machines(cores=16.0))


def test_init_rejects_unknown_machine():
    topology = make_topology([("api", 10.0, 100.0, {"machine": 3})])
    with pytest.raises(ConfigurationError):
        init_cluster(topology, make_machines(k=2))


def test_init_rejects_cyclic_topology():
    topology = make_topology([("a", 1.0, 10.0), ("b", 1.0, 10.0)], [("a", "b", 1.0), ("b", "a", 1.0)])
    with pytest.raises(ConfigurationError):
        init_cluster(topology, make_machines())


def test_same_seed_gives_identical_runs(three_tier, machines):
    def run(seed):
        state = init_cluster(three_tier, machines, seed=seed, latency_jitter=0.2)
        out = []
        for arrivals in (50, 300, 0, 120):
            state, metrics = step(state, arrivals)
            out.append(metrics)
        return out

    assert run(4) == run(4)
    assert [m.spans for m in run(4)] != [m.spans for m in run(5)]


def test_sockshop_assets_initialise(sockshop_topology_path, machines_path):
    state = init_cluster(load_topology(sockshop_topology_path), load_machines(machines_path))
    assert state.roots == ("front-end",)
    assert state.order[0] == "front-end"
    assert len(state.machines) == 4
    assert set(state.deployments) == {
        "front-end",
        "orders",
        "carts",
        "catalogue",
        "random-item",
        "payment",
        "shipping",
    }


# -----------------------------
# step
# -----------------------------
def test_idle_interval(single_service, machines):
    state = init_cluster(single_service, machines)
    new_state, metrics = step(state, 0)
    assert metrics.processed == 0
    assert metrics.failed == 0
    assert metrics.avg_response_time == 0.0
    assert new_state.machine_utils() == state.machine_utils()


def test_overflow_beyond_capacity_fails(machines):
    topology = make_topology([("api", 10.0, 10.0, {"queue_capacity": 0})])
    _, metrics = step(init_cluster(topology, machines), 15)
    assert metrics.processed == 10
    assert metrics.failed == 5
    assert metrics.queued_after == 0


def test_queue_holds_overflow_until_full(machines):
    topology = make_topology([("api", 10.0, 10.0, {"queue_capacity": 3})])
    state, metrics = step(init_cluster(topology, machines), 15)
    assert (metrics.processed, metrics.failed, metrics.queued_after) == (10, 2, 3)
    state, metrics = step(state, 0)
    assert (metrics.processed, metrics.failed, metrics.queued_after) == (3, 0, 0)


def test_two_hop_response_time_without_queueing(machines):
    topology = make_topology([("a", 10.0, 100.0), ("b", 20.0, 100.0)], [("a", "b", 1.0)])
    _, metrics = step(init_cluster(topology, machines), 50)
    assert metrics.avg_response_time == pytest.approx(30.0)
    assert metrics.services["b"].incoming == 50
    assert metrics.rps == pytest.approx(100 / 60.0)


def test_queueing_delay_adds_to_latency(machines):
    topology = make_topology([("api", 10.0, 10.0)])
    _, metrics = step(init_cluster(topology, machines, interval_seconds=60), 15)
    snap = metrics.services["api"]
    assert snap.queue == 5
    assert snap.queue_delay_ms == pytest.approx(5 / 10 * 60_000)
    assert snap.latency_ms == pytest.approx(10.0 + 30_000.0)


def test_fan_out_carries_fractions_between_intervals(machines):
    topology = make_topology([("a", 1.0, 1000.0), ("b", 1.0, 1000.0)], [("a", "b", 0.5)])
    state = init_cluster(topology, machines)
    forwarded = []
    for _ in range(4):
        state, metrics = step(state, 3)
        forwarded.append(metrics.services["b"].incoming)
    assert forwarded == [1, 2, 1, 2]


def test_spans_cover_roots_and_used_edges(three_tier, machines):
    _, metrics = step(init_cluster(three_tier, machines), 10)
    pairs = {(s.parent_service, s.service) for s in metrics.spans}
    assert pairs == {(None, "web"), ("web", "app"), ("app", "db")}


def test_step_rejects_negative_arrivals(single_service, machines):
    with pytest.raises(DomainError):
        step(init_cluster(single_service, machines), -1)


def test_conservation_over_random_topologies():
    rng = np.random.default_rng(17)
    steps = 0
    for _ in range(20):
        topology = random_topology(rng)
        names = [s.id for s in topology.services]
        state = init_cluster(topology, make_machines(cores=64.0, memory=65536.0), seed=int(rng.integers(1000)))
        for _ in range(500):
            action = None
            if rng.random() < 0.2:
                action = ScalingAction(
                    target=str(rng.choice(names)), h=int(rng.integers(-1, 2)), v_cpu=int(rng.integers(-2, 3))
                )
            state, m = step(state, int(rng.integers(0, 400)), action)
            assert m.arrived == m.processed + m.failed + (m.queued_after - m.queued_before)
            assert all(d.queue <= d.queue_capacity for d in state.deployments.values())
            assert all(0.0 <= u <= 1.0 for u in m.machine_utils)
            steps += 1
    assert steps == 10_000


def test_more_replicas_never_fail_more():
    rng = np.random.default_rng(8)
    for _ in range(50):
        extra_fields = {"max_replicas": 8, "queue_capacity": int(rng.integers(0, 50))}
        topology = make_topology([("api", 10.0, float(rng.integers(5, 100)), extra_fields)])
        state = init_cluster(topology, make_machines(cores=16.0))
        for _ in range(int(rng.integers(0, 4))):
            state, _ = step(state, int(rng.integers(0, 300)))
        arrivals = int(rng.integers(0, 400))
        failures = []
        for extra in range(4):
            scaled = apply_action(state, ScalingAction("api", h=extra)) if extra else state
            failures.append(step(scaled, arrivals)[1].failed)
        assert failures == sorted(failures, reverse=True)


def test_more_replicas_at_a_sink_never_fail_more(three_tier, machines):
    rng = np.random.default_rng(21)
    for _ in range(30):
        state = init_cluster(three_tier, machines)
        for _ in range(3):
            state, _ = step(state, int(rng.integers(0, 300)))
        arrivals = int(rng.integers(0, 300))
        base = step(state, arrivals)[1].failed
        scaled = step(apply_action(state, ScalingAction("db", h=1)), arrivals)[1].failed
        assert scaled <= base


def test_response_time_covers_chain_base_times(machines):
    topology = make_topology(
        [("a", 10.0, 60.0), ("b", 20.0, 40.0), ("c", 30.0, 80.0), ("d", 5.0, 50.0)],
        [("a", "b", 1.0), ("b", "c", 1.0), ("a", "d", 1.0)],
    )
    rng = np.random.default_rng(2)
    state = init_cluster(topology, machines)
    for _ in range(200):
        state, m = step(state, int(rng.integers(1, 150)))
        assert m.avg_response_time >= 10.0 + 20.0 + 30.0 - 1e-9


# -----------------------------
# apply_action
# -----------------------------
def test_apply_action_examples(machines):
    topology = make_topology([("api", 10.0, 100.0, {"replicas": 2, "cpu_per_replica": 2.0})])
    state = init_cluster(topology, machines)
    assert apply_action(state, ScalingAction("api", h=1)).deployments["api"].replicas == 3
    assert apply_action(state, ScalingAction("api", h=-3)).deployments["api"].replicas == 1
    scaled = apply_action(state, ScalingAction("api", v_cpu=2, cpu_step=0.5))
    assert scaled.deployments["api"].cpu_per_replica == pytest.approx(3.0)
    assert state.deployments["api"].replicas == 2
    assert state.deployments["api"].cpu_per_replica == 2.0


def test_apply_action_clamps_to_headroom_and_minimum(machines):
    topology = make_topology([("api", 10.0, 100.0, {"replicas": 2, "cpu_per_replica": 2.0, "max_replicas": 10})])
    state = init_cluster(topology, machines)
    grown = apply_action(state, ScalingAction("api", h=5))
    assert grown.deployments["api"].replicas == 4
    fat = apply_action(state, ScalingAction("api", v_cpu=20, cpu_step=1.0))
    assert fat.deployments["api"].cpu_per_replica == pytest.approx(4.0)
    thin = apply_action(state, ScalingAction("api", v_cpu=-20, cpu_step=1.0))
    assert thin.deployments["api"].cpu_per_replica == pytest.approx(0.25)


def test_vertical_scaling_speeds_up_service(machines):
    topology = make_topology([("api", 10.0, 100.0)])
    state = apply_action(init_cluster(topology, machines), ScalingAction("api", v_cpu=2, cpu_step=0.5))
    assert state.deployments["api"].service_time_ms == pytest.approx(5.0)
    assert state.deployments["api"].capacity == 200


def test_apply_action_unknown_target(single_service, machines):
    with pytest.raises(DomainError):
        apply_action(init_cluster(single_service, machines), ScalingAction("nope", h=1))


# -----------------------------
# action_space
# -----------------------------
@pytest.mark.parametrize("K, I, n, m, size", [(1, 1, 1, 1, 9), (1, 1, 0, 0, 1), (2, 1, 1, 1, 81), (1, 2, 1, 2, 225)])
def test_action_space_size(K, I, n, m, size):
    actions = action_space(K, I, n, m)
    assert len(actions) == size
    assert len(set(actions)) == size
    assert all(v == (0, 0) for v in actions[0])


def test_action_space_order_turns_first_slot_fastest():
    actions = action_space(1, 1, 1, 1)
    assert [a[0] for a in actions[:4]] == [(0, 0), (1, 0), (-1, 0), (0, 1)]


def test_action_space_cap():
    with pytest.raises(ActionSpaceTooLargeError):
        action_space(3, 2, 1, 2, cap=10_000)


def test_to_scaling_action():
    action = to_scaling_action(((1, -2),), "api", n=1)
    assert (action.h, action.v_cpu, action.v_mem) == (1, -2, 0)
    both = to_scaling_action(((1, 1), (1, -1)), "api", n=1, mem_step=128.0)
    assert (both.h, both.v_cpu, both.v_mem, both.mem_step) == (1, 1, -1, 128.0)
    assert to_scaling_action(((0, 0),), "api", n=1) == ScalingAction("api")
