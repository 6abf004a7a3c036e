from pathlib import Path

import pytest

from src.settings import MachinesConfig, TopologyConfig

ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = ROOT / "configs"
DATA_DIR = ROOT / "data"


def make_topology(services, edges=()):
    """services: (id, base_ms, rate[, extra fields]) tuples; edges: (src, dst, p)."""
    specs = []
    for entry in services:
        sid, base, rate, *rest = entry
        spec = {"id": sid, "base_service_time_ms": base, "per_replica_rate": rate}
        if rest:
            spec.update(rest[0])
        specs.append(spec)
    return TopologyConfig.model_validate(
        {
            "services": specs,
            "edges": [{"from": s, "to": t, "branch_probability": p} for s, t, p in edges],
        }
    )


def make_machines(k=1, cores=8.0, memory=16384.0, threshold=0.7):
    return MachinesConfig.model_validate(
        {"machines": [{"id": i, "cpu_cores": cores, "memory": memory, "util_threshold": threshold} for i in range(k)]}
    )


@pytest.fixture
def single_service():
    return make_topology([("api", 10.0, 100.0)])


@pytest.fixture
def three_tier():
    return make_topology(
        [("web", 10.0, 100.0), ("app", 20.0, 100.0), ("db", 30.0, 100.0)],
        [("web", "app", 1.0), ("app", "db", 0.5)],
    )


@pytest.fixture
def machines():
    return make_machines()


@pytest.fixture
def sockshop_topology_path():
    return CONFIG_DIR / "sockshop_topology.toml"


@pytest.fixture
def machines_path():
    return CONFIG_DIR / "machines.toml"


@pytest.fixture
def sample_trace_path():
    return DATA_DIR / "sample_trace.csv"


@pytest.fixture
def sample_spans_path():
    return DATA_DIR / "sample_spans.csv"
