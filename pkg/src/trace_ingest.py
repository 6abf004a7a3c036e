"""Workload traces: CSV ingestion, synthetic generation and load leveling."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.errors import ConfigurationError, DomainError, EmptyTraceError, TraceParseError
from src.settings import PATTERN_PARAMS, PatternParams

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["timestamp_s", "request_rate", "cpu_util", "mem_util"]
DEFAULT_NUM_LEVELS = 10

# Alibaba v2018 machine_usage columns, after the file has been given a header.
# net_in stands in for request_rate; utilizations are percentages.
ALIBABA_COLUMN_MAP = {
    "time_stamp": "timestamp_s",
    "cpu_util_percent": "cpu_util",
    "mem_util_percent": "mem_util",
    "net_in": "request_rate",
}


@dataclass(frozen=True)
class TraceRecord:
    timestamp: float
    request_rate: float
    cpu_util: float
    mem_util: float

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise DomainError(f"negative timestamp {self.timestamp}")
        if not self.request_rate >= 0:
            raise DomainError(f"request_rate {self.request_rate} must be >= 0")
        for name in ("cpu_util", "mem_util"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} {value} outside [0, 1]")


@dataclass(frozen=True)
class WorkloadTrace:
    interval_seconds: float
    records: tuple[TraceRecord, ...]

    def __post_init__(self) -> None:
        if not self.interval_seconds > 0:
            raise DomainError("interval_seconds must be positive")
        previous = -math.inf
        for record in self.records:
            if record.timestamp <= previous:
                raise DomainError("trace timestamps must be strictly increasing")
            ratio = record.timestamp / self.interval_seconds
            if abs(ratio - round(ratio)) > 1e-9:
                raise DomainError(
                    f"timestamp {record.timestamp} is not a multiple of {self.interval_seconds}"
                )
            previous = record.timestamp

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name not in ("request_rate", "cpu_util", "mem_util", "timestamp"):
            raise DomainError(f"unknown trace column {name!r}")
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "timestamp_s": self.column("timestamp"),
                "request_rate": self.column("request_rate"),
                "cpu_util": self.column("cpu_util"),
                "mem_util": self.column("mem_util"),
            }
        )


@dataclass(frozen=True, order=True)
class LoadLevel:
    level: int
    num_levels: int

    def __post_init__(self) -> None:
        if self.num_levels < 1:
            raise DomainError("num_levels must be >= 1")
        if not 0 <= self.level < self.num_levels:
            raise DomainError(f"level {self.level} outside [0, {self.num_levels - 1}]")

    def __int__(self) -> int:
        return self.level


# -----------------------------
# Ingestion
# -----------------------------
def _parser_error_line(exc: Exception) -> int:
    match = re.search(r"line (\d+)", str(exc))
    return int(match.group(1)) if match else 0


def load_trace(
    path: Path | str,
    interval_seconds: float = 60.0,
    column_map: Mapping[str, str] | None = None,
    utilization_scale: float = 1.0,
) -> WorkloadTrace:
    """Read a trace CSV and mean-aggregate its rows onto the interval grid.

    Data row ``i`` (0-based) is reported as file line ``i + 2``.
    """
    if not interval_seconds > 0:
        raise DomainError("interval_seconds must be positive")
    path = Path(path)

    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError as exc:
        raise EmptyTraceError(f"{path} is empty") from exc
    except pd.errors.ParserError as exc:
        raise TraceParseError(_parser_error_line(exc), f"malformed CSV: {exc}") from exc

    if column_map:
        raw = raw.rename(columns=dict(column_map))
    raw.columns = [str(c).strip() for c in raw.columns]
    missing = [c for c in TRACE_COLUMNS if c not in raw.columns]
    if missing:
        raise TraceParseError(1, f"missing columns {missing}")

    raw = raw[TRACE_COLUMNS]
    blank = raw.apply(lambda col: col.fillna("").str.strip()).eq("").all(axis=1)
    raw = raw[~blank]
    if raw.empty:
        raise EmptyTraceError(f"{path} has no data rows")

    frame = raw.apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    bad = frame.isna().any(axis=1)
    if bad.any():
        idx = int(bad.idxmax())
        raise TraceParseError(idx + 2, f"malformed row {raw.loc[idx].tolist()}")

    frame[["cpu_util", "mem_util"]] = frame[["cpu_util", "mem_util"]] / utilization_scale

    checks = [
        ("timestamp_s", frame["timestamp_s"] < 0, "negative timestamp"),
        ("request_rate", frame["request_rate"] < 0, "negative request_rate"),
        ("cpu_util", ~frame["cpu_util"].between(0.0, 1.0), "cpu_util outside [0, 1]"),
        ("mem_util", ~frame["mem_util"].between(0.0, 1.0), "mem_util outside [0, 1]"),
    ]
    for column, violated, message in checks:
        if violated.any():
            idx = int(violated.idxmax())
            raise TraceParseError(idx + 2, f"{message}: {frame.loc[idx, column]}")

    frame["bucket"] = np.floor(frame["timestamp_s"] / interval_seconds).astype(np.int64)
    grouped = frame.groupby("bucket", sort=True)[["request_rate", "cpu_util", "mem_util"]].mean()

    records = tuple(
        TraceRecord(
            timestamp=float(bucket) * interval_seconds,
            request_rate=float(row["request_rate"]),
            cpu_util=float(np.clip(row["cpu_util"], 0.0, 1.0)),
            mem_util=float(np.clip(row["mem_util"], 0.0, 1.0)),
        )
        for bucket, row in grouped.iterrows()
    )
    logger.info("loaded %d rows from %s into %d intervals", len(frame), path, len(records))
    return WorkloadTrace(interval_seconds=float(interval_seconds), records=records)


def save_trace(trace: WorkloadTrace, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace.to_frame().to_csv(path, index=False, lineterminator="\n")
    return path


# -----------------------------
# Leveling
# -----------------------------
def discretize(util: float, num_levels: int = DEFAULT_NUM_LEVELS) -> LoadLevel:
    """Map a utilization fraction to its level; 1.0 lands in the top level."""
    if num_levels < 1:
        raise DomainError("num_levels must be >= 1")
    if not 0.0 <= util <= 1.0:
        raise DomainError(f"utilization {util} outside [0, 1]")
    return LoadLevel(min(math.floor(util * num_levels), num_levels - 1), num_levels)


def level_series(
    trace: WorkloadTrace,
    num_levels: int = DEFAULT_NUM_LEVELS,
    column: str = "cpu_util",
    rate_capacity: float | None = None,
) -> list[LoadLevel]:
    """Discretize one trace column element-wise.

    For ``request_rate`` the rate is first normalised by ``rate_capacity``
    (default: the trace peak) and capped at 1.
    """
    if len(trace) == 0:
        raise EmptyTraceError("cannot level an empty trace")
    if column == "request_rate":
        rates = trace.column("request_rate")
        capacity = rate_capacity if rate_capacity is not None else float(rates.max())
        if capacity < 0:
            raise DomainError("rate_capacity must be non-negative")
        values = np.minimum(rates / capacity, 1.0) if capacity > 0 else np.zeros_like(rates)
    elif column in ("cpu_util", "mem_util"):
        values = trace.column(column)
    else:
        raise DomainError(f"cannot level column {column!r}")
    return [discretize(float(v), num_levels) for v in values]


# -----------------------------
# Synthetic workloads
# -----------------------------
def _pattern_rates(pattern: str, params: PatternParams, horizon: int) -> np.ndarray:
    t = np.arange(horizon, dtype=float)
    p: Any = params
    if pattern == "constant":
        return np.full(horizon, p.rate, dtype=float)
    if pattern == "sinusoid":
        return p.base + p.amplitude * np.sin(2.0 * np.pi * t / p.period + p.phase)
    if pattern == "step":
        return np.where(t >= p.at, p.high, p.low).astype(float)
    if pattern == "replay":
        return np.resize(np.asarray(p.rates, dtype=float), horizon)
    raise ConfigurationError(f"unknown workload pattern {pattern!r}")


def synth_workload(
    pattern: str,
    params: Mapping[str, Any] | PatternParams,
    horizon: int,
    seed: int = 0,
    interval_seconds: float = 60.0,
) -> WorkloadTrace:
    """Generate a seeded synthetic trace of ``horizon`` intervals.

    Utilization is derived from the rate: cpu = rate / peak_rate, memory a
    fixed fraction of cpu.
    """
    model = PATTERN_PARAMS.get(pattern)
    if model is None:
        raise ConfigurationError(
            f"unknown workload pattern {pattern!r}; expected one of {sorted(PATTERN_PARAMS)}"
        )
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    try:
        raw = params.model_dump() if isinstance(params, PatternParams) else dict(params)
        parsed = model.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid {pattern} parameters: {exc}") from exc

    rates = _pattern_rates(pattern, parsed, horizon)
    rng = np.random.default_rng(seed)
    if parsed.noise_std > 0:
        rates = rates + rng.normal(0.0, parsed.noise_std, size=horizon)
    rates = np.clip(rates, 0.0, None)

    peak = parsed.peak_rate if parsed.peak_rate is not None else float(rates.max())
    cpu = np.clip(rates / peak, 0.0, 1.0) if peak > 0 else np.zeros(horizon)
    mem = cpu * parsed.mem_ratio

    records = tuple(
        TraceRecord(
            timestamp=i * float(interval_seconds),
            request_rate=float(rates[i]),
            cpu_util=float(cpu[i]),
            mem_util=float(mem[i]),
        )
        for i in range(horizon)
    )
    return WorkloadTrace(interval_seconds=float(interval_seconds), records=records)


def scale_to_mean_rate(trace: WorkloadTrace, mean_rate: float) -> WorkloadTrace:
    """Multiply every request rate so the trace averages ``mean_rate``.

    The shape of the trace (and so its load levels) is unchanged.
    """
    if not mean_rate >= 0:
        raise DomainError("mean_rate must be >= 0")
    if len(trace) == 0:
        raise EmptyTraceError("cannot scale an empty trace")
    current = float(trace.column("request_rate").mean())
    if current == 0.0:
        raise DomainError("cannot rescale a trace without traffic")
    factor = mean_rate / current
    records = tuple(replace(r, request_rate=r.request_rate * factor) for r in trace.records)
    return WorkloadTrace(interval_seconds=trace.interval_seconds, records=records)
