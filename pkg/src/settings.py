"""Typed configuration for topologies, machines, agents and experiments.

Every config is a pydantic model so that malformed TOML surfaces as a
validation error naming the offending field.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Mapping

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigurationError

DEFAULT_OUTPUT_DIR = Path("reports")
OUTPUT_DIR_ENV = "CHAINSCALE_OUTPUT_DIR"

DEFAULT_PERIODS = [1000, 2000, 3000, 4000, 5000]


# -----------------------------
# Cluster topology
# -----------------------------
class ServiceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(..., min_length=1, examples=["front-end"])
    base_service_time_ms: float = Field(..., gt=0, examples=[20.0])
    # requests one replica serves per interval at the reference allocation
    per_replica_rate: float = Field(..., gt=0, examples=[1500.0])
    replicas: int = Field(1, ge=1)
    max_replicas: int = Field(10, ge=1)
    cpu_per_replica: float = Field(1.0, gt=0)
    mem_per_replica: float = Field(512.0, gt=0)
    reference_cpu: float | None = Field(None, gt=0)
    reference_mem: float | None = Field(None, gt=0)
    min_cpu: float = Field(0.25, gt=0)
    min_mem: float = Field(128.0, gt=0)
    machine: int = Field(0, ge=0)
    queue_capacity: int = Field(1000, ge=0)

    @model_validator(mode="after")
    def _check_replicas(self) -> "ServiceSpec":
        if self.replicas > self.max_replicas:
            raise ValueError(f"replicas ({self.replicas}) exceed max_replicas ({self.max_replicas})")
        return self

    @property
    def ref_cpu(self) -> float:
        return self.reference_cpu if self.reference_cpu is not None else self.cpu_per_replica

    @property
    def ref_mem(self) -> float:
        return self.reference_mem if self.reference_mem is not None else self.mem_per_replica


class EdgeSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    source: str = Field(..., alias="from")
    target: str = Field(..., alias="to")
    branch_probability: float = Field(1.0, ge=0.0, le=1.0)


class TopologyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    services: list[ServiceSpec] = Field(..., min_length=1)
    edges: list[EdgeSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_references(self) -> "TopologyConfig":
        ids = [s.id for s in self.services]
        if len(set(ids)) != len(ids):
            raise ValueError("service ids must be unique")
        known = set(ids)
        for edge in self.edges:
            for end in (edge.source, edge.target):
                if end not in known:
                    raise ValueError(f"edge references unknown service {end!r}")
        return self

    def service(self, service_id: str) -> ServiceSpec:
        for spec in self.services:
            if spec.id == service_id:
                return spec
        raise KeyError(service_id)


class MachineSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int = Field(..., ge=0)
    cpu_cores: float = Field(..., gt=0)
    memory: float = Field(..., gt=0)
    util_threshold: float = Field(0.7, gt=0.0, le=1.0)


class MachinesConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    machines: list[MachineSpec] = Field(..., min_length=1)

    @model_validator(mode="after")
    def _check_ids(self) -> "MachinesConfig":
        ids = sorted(m.id for m in self.machines)
        if ids != list(range(len(ids))):
            raise ValueError("machine ids must be exactly 0..K-1")
        self.machines = sorted(self.machines, key=lambda m: m.id)
        return self


# -----------------------------
# Synthetic workloads
# -----------------------------
class PatternParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    noise_std: float = Field(0.0, ge=0.0)
    # rate that maps to cpu_util 1.0; defaults to the generated peak
    peak_rate: float | None = Field(None, gt=0)
    mem_ratio: float = Field(0.6, ge=0.0, le=1.0)


class ConstantParams(PatternParams):
    rate: float = Field(..., ge=0)


class SinusoidParams(PatternParams):
    base: float = Field(..., ge=0)
    amplitude: float = Field(..., ge=0)
    period: float = Field(..., gt=0)
    phase: float = 0.0


class StepParams(PatternParams):
    low: float = Field(..., ge=0)
    high: float = Field(..., ge=0)
    at: int = Field(..., ge=0)


class ReplayParams(PatternParams):
    rates: list[float] = Field(..., min_length=1)


PATTERN_PARAMS: dict[str, type[PatternParams]] = {
    "constant": ConstantParams,
    "sinusoid": SinusoidParams,
    "step": StepParams,
    "replay": ReplayParams,
}


class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pattern: str = Field(..., examples=["sinusoid"])
    params: dict[str, Any] = Field(default_factory=dict)


# -----------------------------
# Agent
# -----------------------------
class AgentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(0.1, gt=0.0, le=1.0)
    gamma: float = Field(0.9, ge=0.0, le=1.0)
    epsilon: float = Field(0.1, ge=0.0, le=1.0)
    epsilon_decay: float = Field(0.995, gt=0.0, le=1.0)
    rt_max_ms: float = Field(100.0, gt=0.0)
    # per-machine U_k^max; machine config thresholds are used when unset
    util_thresholds: list[float] | None = None
    algorithm: Literal["sarsa", "q_learning"] = "sarsa"

    h_range: int = Field(1, ge=0)
    v_range: int = Field(2, ge=0)
    cpu_step: float = Field(0.5, gt=0.0)
    mem_step: float = Field(256.0, gt=0.0)
    resource_types: int = Field(1, ge=1, le=2)
    action_cap: int = Field(10_000, ge=1)

    train_every: int = Field(1, ge=1)
    pool_capacity: int = Field(10_000, ge=1)

    num_levels: int = Field(10, ge=1)
    latency_buckets: int = Field(8, ge=1)

    predictor: Literal["last_value", "moving_average", "markov"] = "markov"
    predictor_window: int = Field(3, ge=1)

    tree_max_depth: int = Field(3, ge=1)
    retrain_threshold: float = Field(0.05, gt=0.0, lt=1.0)
    critical_queue_multiple: float = Field(2.0, gt=0.0)
    span_window: int = Field(1, ge=1)
    chain_period: int = Field(1, ge=1)
    static_chain: bool = False

    @field_validator("util_thresholds")
    @classmethod
    def _check_thresholds(cls, value: list[float] | None) -> list[float] | None:
        if value is not None and any(not 0.0 < u <= 1.0 for u in value):
            raise ValueError("util thresholds must lie in (0, 1]")
        return value


# -----------------------------
# Experiment
# -----------------------------
PolicyName = Literal["chainsformer", "threshold", "hybrid", "none"]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trace_path: Path | None = None
    synth: SynthSpec | None = None
    topology_path: Path
    machines_path: Path
    policy: PolicyName = "chainsformer"
    agent: AgentConfig = Field(default_factory=AgentConfig)
    seed: int = 0
    horizon: int = Field(..., ge=1)
    episodes: int = Field(20, ge=0)
    interval_seconds: float = Field(60.0, gt=0.0)
    periods: list[int] = Field(default_factory=lambda: list(DEFAULT_PERIODS))
    threshold: float = Field(0.7, gt=0.0, lt=1.0)
    hybrid_margin: float = Field(0.15, ge=0.0)
    hybrid_window: int = Field(48, ge=1)
    # rescale the workload to this mean request rate (requests per second)
    mean_rate: float | None = Field(None, gt=0.0)
    output_dir: Path = DEFAULT_OUTPUT_DIR

    @field_validator("trace_path", "topology_path", "machines_path")
    @classmethod
    def _must_exist(cls, value: Path | None) -> Path | None:
        if value is not None and not Path(value).exists():
            raise ValueError(f"file not found: {value}")
        return value

    @field_validator("periods")
    @classmethod
    def _positive_periods(cls, value: list[int]) -> list[int]:
        if any(p < 1 for p in value):
            raise ValueError("periods must be positive interval counts")
        return sorted(set(value))

    @model_validator(mode="after")
    def _one_trace_source(self) -> "ExperimentConfig":
        if (self.trace_path is None) == (self.synth is None):
            raise ValueError("exactly one of trace_path or synth must be given")
        return self

    def environment(self) -> dict[str, Any]:
        """Fields that must agree between experiments being compared."""
        return {
            "trace_path": str(self.trace_path) if self.trace_path else None,
            "synth": self.synth.model_dump() if self.synth else None,
            "topology_path": str(self.topology_path),
            "machines_path": str(self.machines_path),
            "seed": self.seed,
            "horizon": self.horizon,
            "interval_seconds": self.interval_seconds,
            "mean_rate": self.mean_rate,
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# -----------------------------
# Loaders
# -----------------------------
def _read_toml(path: Path) -> dict[str, Any]:
    try:
        return toml.load(path)
    except (OSError, toml.TomlDecodeError) as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc


def load_topology(path: Path) -> TopologyConfig:
    try:
        return TopologyConfig.model_validate(_read_toml(Path(path)))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid topology {path}: {exc}") from exc


def load_machines(path: Path) -> MachinesConfig:
    try:
        return MachinesConfig.model_validate(_read_toml(Path(path)))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid machines config {path}: {exc}") from exc


_PATH_FIELDS = ("trace_path", "topology_path", "machines_path")


def _merge_synth(current: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    # a new pattern starts from empty params, the same pattern keeps the file's
    pattern = override.get("pattern", current.get("pattern"))
    params = dict(current.get("params", {})) if pattern == current.get("pattern") else {}
    params.update(override.get("params", {}))
    return {"pattern": pattern, "params": params}


def load_experiment(path: Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read an experiment TOML; relative paths resolve against its directory.

    Raises pydantic's ValidationError so callers can report the field name.
    """
    path = Path(path)
    data = _read_toml(path)
    for key in _PATH_FIELDS:
        if key in data and not Path(data[key]).is_absolute():
            data[key] = str(path.parent / data[key])
    for key, value in (overrides or {}).items():
        if key == "agent" and isinstance(value, Mapping):
            data["agent"] = {**data.get("agent", {}), **value}
        elif key == "synth" and isinstance(value, Mapping):
            data["synth"] = _merge_synth(data.get("synth") or {}, value)
            data.pop("trace_path", None)
        else:
            data[key] = value
    return ExperimentConfig.model_validate(data)
