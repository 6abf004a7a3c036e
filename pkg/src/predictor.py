"""Next-interval load-level forecasting.

The built-in models are statistical; anything implementing
:class:`LevelForecaster` can replace them in the control loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence

import numpy as np

from src.errors import DomainError, TrainingError
from src.trace_ingest import LoadLevel


class PredictorKind(str, Enum):
    LAST_VALUE = "last_value"
    MOVING_AVERAGE = "moving_average"
    MARKOV = "markov"


class LevelForecaster(Protocol):
    def predict_next(self, recent: Sequence[LoadLevel]) -> LoadLevel: ...


@dataclass(frozen=True)
class PredictorModel:
    kind: PredictorKind
    window: int
    num_levels: int
    # markov only: counts[i][j] = observed i -> j transitions
    transition_counts: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.window < 1:
            raise DomainError("window must be >= 1")
        if self.kind is PredictorKind.MARKOV:
            counts = self.transition_counts
            if counts is None or counts.shape != (self.num_levels, self.num_levels):
                raise DomainError("markov model needs a num_levels x num_levels count matrix")
            if (counts < 0).any():
                raise DomainError("transition counts must be non-negative")

    def transition_matrix(self) -> np.ndarray:
        """Row-normalised transition probabilities; unobserved rows stay zero."""
        if self.transition_counts is None:
            raise DomainError(f"{self.kind.value} model has no transition matrix")
        counts = self.transition_counts.astype(float)
        sums = counts.sum(axis=1, keepdims=True)
        return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)

    def predict_next(self, recent: Sequence[LoadLevel]) -> LoadLevel:
        return predict_next(self, recent)


def fit(
    history: Sequence[LoadLevel],
    kind: PredictorKind | str = PredictorKind.MARKOV,
    window: int = 3,
    num_levels: int | None = None,
) -> PredictorModel:
    kind = PredictorKind(kind)
    if window < 1:
        raise DomainError("window must be >= 1")
    needed = 2 if kind is PredictorKind.MARKOV else 1
    if len(history) < needed:
        raise TrainingError(f"{kind.value} predictor needs at least {needed} levels of history")
    if num_levels is None:
        num_levels = history[0].num_levels

    if kind is not PredictorKind.MARKOV:
        return PredictorModel(kind=kind, window=window, num_levels=num_levels)

    levels = np.array([lv.level for lv in history], dtype=np.int64)
    if levels.max() >= num_levels:
        raise TrainingError("history contains levels beyond num_levels")
    counts = np.zeros((num_levels, num_levels), dtype=np.int64)
    np.add.at(counts, (levels[:-1], levels[1:]), 1)
    counts.setflags(write=False)
    return PredictorModel(kind=kind, window=window, num_levels=num_levels, transition_counts=counts)


def predict_next(model: PredictorModel, recent: Sequence[LoadLevel]) -> LoadLevel:
    if len(recent) == 0:
        raise DomainError("cannot predict from an empty window")
    last = recent[-1].level
    if last >= model.num_levels:
        raise DomainError(f"level {last} is beyond the model's {model.num_levels} levels")

    if model.kind is PredictorKind.LAST_VALUE:
        level = last
    elif model.kind is PredictorKind.MOVING_AVERAGE:
        tail = [lv.level for lv in recent[-model.window:]]
        # half-up rounding
        level = math.floor(sum(tail) / len(tail) + 0.5)
    else:
        assert model.transition_counts is not None
        row = model.transition_counts[last]
        # argmax returns the first maximum, i.e. the lowest level on ties
        level = int(np.argmax(row)) if row.sum() > 0 else last

    return LoadLevel(min(max(level, 0), model.num_levels - 1), model.num_levels)


def next_step_accuracy(forecaster: LevelForecaster, series: Sequence[LoadLevel], warmup: int = 1) -> float:
    """Fraction of positions ``t >= warmup`` where the forecast from
    ``series[:t]`` equals ``series[t]``."""
    if warmup < 1 or warmup >= len(series):
        raise DomainError("series must be longer than the warmup")
    hits = sum(
        forecaster.predict_next(series[:t]).level == series[t].level for t in range(warmup, len(series))
    )
    return hits / (len(series) - warmup)
