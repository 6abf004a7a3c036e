"""Wires traces, topology, predictor, analyzer and policies into runs.

Each run writes into its output directory:

- ``metrics.csv``: one row per interval
- ``summary.csv``: mean RPS, total failures and mean response time per
  period prefix
- ``manifest.json``: config hash, seed and component versions
- ``qtable.csv`` / ``pool.csv`` / ``critical_tree.pkl``: learned artifacts
  (chainsformer policy only)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import joblib
import networkx as nx
import numpy as np
import pandas as pd
import sklearn
from joblib import Parallel, delayed
from tqdm import tqdm

import src
from src.chain_analyzer import ChainAnalyzer
from src.cluster_sim import ClusterState, init_cluster
from src.errors import ExperimentValidationError
from src.predictor import PredictorModel, fit
from src.scaler import (
    Agent,
    ControlLoopResult,
    HybridAutoscaler,
    LoopMode,
    baseline_threshold,
    run_baseline_loop,
    run_control_loop,
)
from src.scaler.control_loop import BaselinePolicy
from src.settings import ExperimentConfig, load_machines, load_topology
from src.trace_ingest import WorkloadTrace, level_series, load_trace, scale_to_mean_rate, synth_workload

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"
MANIFEST_FILE = "manifest.json"
QTABLE_FILE = "qtable.csv"
POOL_FILE = "pool.csv"
TREE_FILE = "critical_tree.pkl"

SUMMARY_COLUMNS = ["period", "intervals", "mean_rps", "total_failures", "mean_avg_rt_ms"]
DELTA_COLUMNS = {
    "mean_rps": "rps_delta_pct",
    "total_failures": "failures_delta_pct",
    "mean_avg_rt_ms": "avg_rt_delta_pct",
}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: pd.DataFrame
    summary: pd.DataFrame
    output_dir: Path
    artifacts: list[Path] = field(default_factory=list)


# -----------------------------
# Building blocks
# -----------------------------
def build_trace(config: ExperimentConfig) -> WorkloadTrace:
    if config.trace_path is not None:
        trace = load_trace(config.trace_path, interval_seconds=config.interval_seconds)
    else:
        assert config.synth is not None
        trace = synth_workload(
            config.synth.pattern,
            config.synth.params,
            horizon=config.horizon,
            seed=config.seed,
            interval_seconds=config.interval_seconds,
        )
    if config.mean_rate is not None:
        trace = scale_to_mean_rate(trace, config.mean_rate)
    return trace


def build_cluster(config: ExperimentConfig) -> ClusterState:
    return init_cluster(
        load_topology(config.topology_path),
        load_machines(config.machines_path),
        seed=config.seed,
        interval_seconds=config.interval_seconds,
    )


def build_analyzer(config: ExperimentConfig) -> ChainAnalyzer:
    agent = config.agent
    return ChainAnalyzer(
        max_depth=agent.tree_max_depth,
        retrain_threshold=agent.retrain_threshold,
        span_window=agent.span_window,
        static_chain=agent.static_chain,
        random_state=config.seed,
    )


def fit_predictor(config: ExperimentConfig, trace: WorkloadTrace) -> PredictorModel:
    agent = config.agent
    levels = level_series(trace, agent.num_levels, column="request_rate")
    return fit(levels, kind=agent.predictor, window=agent.predictor_window, num_levels=agent.num_levels)


def baseline_policy(config: ExperimentConfig) -> BaselinePolicy | None:
    if config.policy == "threshold":
        return lambda state: baseline_threshold(state, config.threshold)
    if config.policy == "hybrid":
        return HybridAutoscaler(
            margin=config.hybrid_margin,
            window=config.hybrid_window,
            cpu_step=config.agent.cpu_step,
            m=config.agent.v_range,
        )
    return None


def train_agent(
    config: ExperimentConfig, trace: WorkloadTrace, predictor: PredictorModel, progress: bool = False
) -> tuple[Agent, ChainAnalyzer]:
    """Run ``config.episodes`` training episodes from a fresh cluster each time.

    Epsilon decays once per episode. Returns the agent and the analyzer of
    the last episode.
    """
    agent = Agent.from_config(config.agent)
    analyzer = build_analyzer(config)
    # a fresh analyzer per episode, the Q table and pool carry over
    for episode in tqdm(range(config.episodes), desc="episodes", disable=not progress):
        analyzer = build_analyzer(config)
        result = run_control_loop(
            build_cluster(config),
            trace,
            agent,
            predictor,
            analyzer,
            config.horizon,
            mode=LoopMode.TRAIN,
            seed=config.seed + episode,
        )
        logger.info(
            "episode %d/%d: %d decisions, %d updates, %d failures, epsilon %.4f",
            episode + 1,
            config.episodes,
            result.decisions,
            result.updates,
            sum(m.failed for m in result.metrics),
            agent.epsilon,
        )
        agent.end_episode()
    return agent, analyzer


# -----------------------------
# Summaries
# -----------------------------
def summarize(metrics: pd.DataFrame, periods: Sequence[int]) -> pd.DataFrame:
    """Aggregate the first ``p`` intervals for every period ``p`` that fits.

    Response time is averaged over intervals that saw arrivals only; when
    no period fits the run, the whole run is one period.
    """
    n = len(metrics)
    usable = sorted({p for p in periods if p <= n}) or [n]
    rows = []
    for p in usable:
        head = metrics.iloc[:p]
        loaded = head.loc[head["arrived"] > 0, "avg_rt_ms"]
        rows.append(
            {
                "period": p,
                "intervals": len(head),
                "mean_rps": float(head["rps"].mean()) if len(head) else 0.0,
                "total_failures": int(head["failed"].sum()),
                "mean_avg_rt_ms": float(loaded.mean()) if len(loaded) else 0.0,
            }
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def percent_delta(value: float, base: float) -> float:
    if base == 0:
        return 0.0 if value == 0 else math.nan
    return (value - base) / base * 100.0


def _versions() -> dict[str, str]:
    return {
        "chainscale": src.__version__,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
        "networkx": nx.__version__,
        "joblib": joblib.__version__,
    }


def write_manifest(config: ExperimentConfig, output_dir: Path) -> Path:
    manifest = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "policy": config.policy,
        "horizon": config.horizon,
        "versions": _versions(),
        "config": config.model_dump(mode="json"),
    }
    path = output_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


# -----------------------------
# Entry points
# -----------------------------
def run_experiment(
    config: ExperimentConfig, output_dir: Path | None = None, progress: bool = False
) -> ExperimentResult:
    output_dir = Path(output_dir or config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    logger.info("running %s policy for %d intervals (seed %d)", config.policy, config.horizon, config.seed)

    trace = build_trace(config)
    artifacts: list[Path] = []

    result: ControlLoopResult
    if config.policy == "chainsformer":
        predictor = fit_predictor(config, trace)
        agent, _ = train_agent(config, trace, predictor, progress=progress)
        analyzer = build_analyzer(config)
        result = run_control_loop(
            build_cluster(config),
            trace,
            agent,
            predictor,
            analyzer,
            config.horizon,
            mode=LoopMode.EVALUATE,
            seed=config.seed,
        )
        artifacts.append(agent.q.save(output_dir / QTABLE_FILE))
        artifacts.append(agent.pool.save(output_dir / POOL_FILE))
        tree_path = analyzer.save_tree(output_dir / TREE_FILE)
        if tree_path is not None:
            artifacts.append(tree_path)
    else:
        result = run_baseline_loop(
            build_cluster(config), trace, baseline_policy(config), config.horizon, config.agent.num_levels
        )

    metrics = result.to_frame()
    summary = summarize(metrics, config.periods)
    artifacts.insert(0, _write_csv(metrics, output_dir / METRICS_FILE))
    artifacts.insert(1, _write_csv(summary, output_dir / SUMMARY_FILE))
    artifacts.insert(2, write_manifest(config, output_dir))
    logger.info("%s run finished: %s", config.policy, summary.iloc[-1].to_dict())
    return ExperimentResult(config, metrics, summary, output_dir, artifacts)


def _check_environments(configs: Sequence[ExperimentConfig]) -> None:
    if len(configs) < 2:
        raise ExperimentValidationError("compare needs at least two experiment configs")
    reference = configs[0].environment()
    for i, config in enumerate(configs[1:], start=1):
        env = config.environment()
        differing = sorted(k for k in reference if reference[k] != env[k])
        if differing:
            raise ExperimentValidationError(f"config #{i} differs from config #0 in {', '.join(differing)}")


def compare_summaries(labels: Sequence[str], summaries: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """Stack per-run summaries and add percentage deltas against the first."""
    base = summaries[0].set_index("period")
    frames = []
    for label, summary in zip(labels, summaries):
        frame = summary.copy()
        frame.insert(0, "policy", label)
        for column, delta in DELTA_COLUMNS.items():
            frame[delta] = [
                percent_delta(float(v), float(base.loc[p, column])) if p in base.index else math.nan
                for p, v in zip(frame["period"], frame[column])
            ]
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def compare(
    configs: Sequence[ExperimentConfig], output_dir: Path | str, n_jobs: int = 1
) -> pd.DataFrame:
    """Run every config (optionally in parallel) and tabulate the summaries."""
    _check_environments(configs)
    output_dir = Path(output_dir)
    labels = [f"{i:02d}-{c.policy}" for i, c in enumerate(configs)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(run_experiment)(config, output_dir / label) for config, label in zip(configs, labels)
    )
    table = compare_summaries(labels, [r.summary for r in results])
    _write_csv(table, output_dir / "comparison.csv")
    return table


SWEEP_COLUMNS = ["mean_rate", "policy", "mean_rps", "total_failures", "mean_avg_rt_ms"]


def sweep(
    config: ExperimentConfig, rates: Sequence[float], output_dir: Path | str, n_jobs: int = 1
) -> pd.DataFrame:
    """Rerun ``config`` with the workload rescaled to each mean rate.

    One row per rate, taken from the longest summary period, so failures
    and response time can be read off as the load grows.
    """
    if not rates:
        raise ExperimentValidationError("sweep needs at least one mean rate")
    output_dir = Path(output_dir)
    configs = [config.model_copy(update={"mean_rate": float(rate)}) for rate in rates]
    labels = [f"rate-{rate:g}" for rate in rates]
    results = Parallel(n_jobs=n_jobs)(
        delayed(run_experiment)(c, output_dir / label) for c, label in zip(configs, labels)
    )
    rows = []
    for rate, result in zip(rates, results):
        last = result.summary.iloc[-1]
        rows.append((float(rate), config.policy, last["mean_rps"], last["total_failures"], last["mean_avg_rt_ms"]))
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    _write_csv(table, output_dir / "sweep.csv")
    logger.info("sweep over %d rates written to %s", len(rates), output_dir)
    return table
