"""``chainscale`` command line."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, NoReturn

import click
import pandas as pd
import toml
from dotenv import load_dotenv
from pydantic import ValidationError

from src.chain_analyzer import build_call_graph, critical_chain, load_spans, request_distribution
from src.cluster_sim import action_space
from src.errors import ChainScaleError
from src.experiment.runner import compare as compare_runs
from src.experiment.runner import run_experiment
from src.experiment.runner import sweep as sweep_runs
from src.scaler import ExperiencePool, QTable, offline_train
from src.settings import OUTPUT_DIR_ENV, PATTERN_PARAMS, AgentConfig, ExperimentConfig, load_experiment
from src.trace_ingest import save_trace, synth_workload

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DEFAULT_SWEEP_RATES = (400.0, 600.0, 800.0, 1000.0, 1200.0)


def _load(path: Path, overrides: dict[str, Any]) -> ExperimentConfig:
    try:
        return load_experiment(path, {k: v for k, v in overrides.items() if v is not None})
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "config"
        raise click.UsageError(f"{path}: invalid {field}: {first['msg']}") from exc


def _parse_value(raw: str) -> Any:
    """TOML literal when it parses (numbers, booleans, arrays), else the raw string."""
    try:
        return toml.loads(f"value = {raw}")["value"]
    except ValueError:
        return raw


def _key_values(ctx: click.Context, param: click.Parameter, pairs: tuple[str, ...]) -> dict[str, Any]:
    parsed: dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key.strip():
            raise click.BadParameter(f"expected KEY=VALUE, got {pair!r}", ctx=ctx, param=param)
        parsed[key.strip().replace("-", "_")] = _parse_value(raw.strip())
    return parsed


def _fail(exc: ChainScaleError) -> NoReturn:
    logger.debug("command failed", exc_info=exc)
    click.echo(f"❌ {exc}", err=True)
    raise SystemExit(1)


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    show_default=True,
)
def cli(log_level: str) -> None:
    """Chain-aware autoscaling experiments on a simulated microservice cluster."""
    load_dotenv()
    logging.basicConfig(level=log_level.upper(), format=LOG_FORMAT)


_AGENT_FLAGS = ("algorithm", "alpha", "gamma", "epsilon", "static_chain")


def _run_overrides(options: dict[str, Any]) -> dict[str, Any]:
    agent = {k: v for k in _AGENT_FLAGS if (v := options.pop(k)) is not None}
    agent.update(options.pop("agent_fields"))
    synth: dict[str, Any] = {}
    if (pattern := options.pop("synth_pattern")) is not None:
        synth["pattern"] = pattern
    if params := options.pop("synth_params"):
        synth["params"] = params
    periods = options.pop("periods")
    return {
        **options,
        "periods": list(periods) or None,
        "agent": agent or None,
        "synth": synth or None,
    }


@cli.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--policy", type=click.Choice(["chainsformer", "threshold", "hybrid", "none"]))
@click.option("--trace-path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--topology-path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--machines-path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=int)
@click.option("--horizon", type=int)
@click.option("--episodes", type=int)
@click.option("--interval-seconds", type=float)
@click.option("--threshold", type=float, help="CPU threshold of the threshold baseline.")
@click.option("--hybrid-margin", type=float)
@click.option("--hybrid-window", type=int)
@click.option("--period", "periods", type=int, multiple=True, help="Summary period; repeat for several.")
@click.option("--mean-rate", type=float, help="Rescale the workload to this mean request rate.")
@click.option("--synth-pattern", type=click.Choice(sorted(PATTERN_PARAMS)))
@click.option(
    "--synth",
    "synth_params",
    multiple=True,
    callback=_key_values,
    metavar="KEY=VALUE",
    help="Synthetic workload parameter, e.g. --synth period=12.",
)
@click.option("--algorithm", type=click.Choice(["sarsa", "q_learning"]))
@click.option("--alpha", type=float)
@click.option("--gamma", type=float)
@click.option("--epsilon", type=float)
@click.option("--static-chain/--dynamic-chain", default=None)
@click.option(
    "--agent",
    "agent_fields",
    multiple=True,
    callback=_key_values,
    metavar="KEY=VALUE",
    help="Any agent setting, e.g. --agent rt_max_ms=50 --agent predictor=last_value.",
)
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), envvar=OUTPUT_DIR_ENV)
@click.option("--progress/--no-progress", default=True, show_default=True)
def run(config_path: Path, progress: bool, **options: Any) -> None:
    """Run one experiment and write metrics, summary and manifest."""
    config = _load(config_path, _run_overrides(options))
    try:
        result = run_experiment(config, progress=progress)
    except ChainScaleError as exc:
        _fail(exc)
    click.echo(f"✅ {config.policy} run finished ({config.horizon} intervals)")
    click.echo(result.summary.to_string(index=False))
    for path in result.artifacts:
        click.echo(f"📌 {path}")


@cli.command()
@click.argument("config_paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), envvar=OUTPUT_DIR_ENV)
@click.option("--jobs", "n_jobs", type=int, default=1, show_default=True)
def compare(config_paths: tuple[Path, ...], output_dir: Path | None, n_jobs: int) -> None:
    """Run several experiments on one environment and tabulate the deltas."""
    configs = [_load(path, {}) for path in config_paths]
    target = output_dir or configs[0].output_dir
    try:
        table = compare_runs(configs, target, n_jobs=n_jobs)
    except ChainScaleError as exc:
        _fail(exc)
    click.echo("✅ comparison finished")
    click.echo(table.to_string(index=False))
    click.echo(f"📌 {Path(target) / 'comparison.csv'}")


@cli.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--rate",
    "rates",
    type=float,
    multiple=True,
    default=DEFAULT_SWEEP_RATES,
    show_default=True,
    help="Mean request rate per run; repeat for several.",
)
@click.option("--policy", type=click.Choice(["chainsformer", "threshold", "hybrid", "none"]))
@click.option("--horizon", type=int)
@click.option("--episodes", type=int)
@click.option("--interval-seconds", type=float)
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), envvar=OUTPUT_DIR_ENV)
@click.option("--jobs", "n_jobs", type=int, default=1, show_default=True)
def sweep(config_path: Path, rates: tuple[float, ...], n_jobs: int, **options: Any) -> None:
    """Scalability sweep: rerun one config at rising mean request rates."""
    output_dir = options.pop("output_dir")
    config = _load(config_path, options)
    target = output_dir or config.output_dir
    try:
        table = sweep_runs(config, sorted(rates), target, n_jobs=n_jobs)
    except ChainScaleError as exc:
        _fail(exc)
    click.echo(f"✅ {config.policy} sweep over {len(rates)} rates finished")
    click.echo(table.to_string(index=False))
    click.echo(f"📌 {Path(target) / 'sweep.csv'}")


@cli.command()
@click.argument("pool_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--qtable", "qtable_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--epochs", type=int, default=1, show_default=True)
@click.option("--alpha", type=float, default=0.1, show_default=True)
@click.option("--gamma", type=float, default=0.9, show_default=True)
def train(
    pool_path: Path, out_path: Path, qtable_path: Path | None, epochs: int, alpha: float, gamma: float
) -> None:
    """Offline training: replay an experience pool into a Q table."""
    try:
        pool = ExperiencePool.load(pool_path)
        if qtable_path is not None:
            q = QTable.load(qtable_path)
        else:
            defaults = AgentConfig()
            q = QTable(len(action_space(1, defaults.resource_types, defaults.h_range, defaults.v_range)))
        offline_train(pool, q, alpha, gamma, epochs)
        q.save(out_path)
    except ChainScaleError as exc:
        _fail(exc)
    click.echo(f"✅ replayed {len(pool)} transitions x {epochs} epochs, {len(q)} Q entries")
    click.echo(f"📌 {out_path}")


@cli.command()
@click.argument("spans_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path))
def analyze(spans_path: Path, out_path: Path | None) -> None:
    """One-shot critical-chain report from a span CSV."""
    try:
        spans = load_spans(spans_path)
        chain = critical_chain(build_call_graph(spans))
    except ChainScaleError as exc:
        _fail(exc)
    shares = request_distribution(spans)
    click.echo(f"🔥 critical chain: {' -> '.join(chain.nodes)} ({chain.total_latency:.2f} ms)")
    for service, share in shares.items():
        click.echo(f"   {service}: {share:.1%} of calls")
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame({"service": list(shares), "share": list(shares.values())})
        frame.to_csv(out_path, index=False, lineterminator="\n")
        click.echo(f"📌 {out_path}")


@cli.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
def synth(config_path: Path, out_path: Path) -> None:
    """Materialise the synthetic trace described by an experiment config."""
    config = _load(config_path, {})
    if config.synth is None:
        raise click.UsageError(f"{config_path} reads a trace file, it has no [synth] section")
    try:
        trace = synth_workload(
            config.synth.pattern,
            config.synth.params,
            horizon=config.horizon,
            seed=config.seed,
            interval_seconds=config.interval_seconds,
        )
    except ChainScaleError as exc:
        _fail(exc)
    save_trace(trace, out_path)
    click.echo(f"✅ {len(trace)} intervals of {config.synth.pattern} workload")
    click.echo(f"📌 {out_path}")
