"""Tabular value function, experience pool and TD update rules."""

from __future__ import annotations

import logging
import math
from collections import deque
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from src.errors import DomainError, NumericError, TrainingError

logger = logging.getLogger(__name__)

QTABLE_HEADER = "# chainscale-qtable v1"
POOL_HEADER = "# chainscale-pool v1"
STATE_FIELDS = ("load_level", "chain_position", "latency_bucket")


class RLState(NamedTuple):
    load_level: int
    chain_position: int
    latency_bucket: int


class Transition(NamedTuple):
    state: RLState
    action: int
    reward: float
    next_state: RLState
    next_action: int


def latency_bucket(latency_ms: float, rt_max_ms: float, buckets: int = 8) -> int:
    """Buckets of RT_max/4, capped at ``buckets - 1``."""
    if not rt_max_ms > 0:
        raise DomainError("RT_max must be positive")
    width = rt_max_ms / 4.0
    return min(int(max(latency_ms, 0.0) // width), buckets - 1)


def _read_meta(path: Path, header: str) -> dict[str, str]:
    meta: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
        if first != header:
            raise TrainingError(f"{path}: expected header {header!r}, got {first!r}")
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
    return meta


class QTable:
    """Q(s, a) over a fixed number of actions; unseen pairs read as 0.0."""

    def __init__(self, n_actions: int, values: Mapping[tuple[RLState, int], float] | None = None):
        if n_actions < 1:
            raise DomainError("a Q table needs at least one action")
        self.n_actions = n_actions
        self._values: dict[tuple[RLState, int], float] = {}
        for (state, action), value in (values or {}).items():
            self.set(state, action, value)

    def _check_action(self, action: int) -> None:
        if not 0 <= action < self.n_actions:
            raise DomainError(f"action {action} outside [0, {self.n_actions})")

    def get(self, state: Sequence[int], action: int) -> float:
        self._check_action(action)
        return self._values.get((RLState(*state), action), 0.0)

    def set(self, state: Sequence[int], action: int, value: float) -> None:
        self._check_action(action)
        if not math.isfinite(value):
            raise NumericError(f"non-finite Q value {value} for {tuple(state)}, action {action}")
        self._values[(RLState(*state), action)] = float(value)

    def row(self, state: Sequence[int]) -> np.ndarray:
        key = RLState(*state)
        return np.array([self._values.get((key, a), 0.0) for a in range(self.n_actions)])

    def max(self, state: Sequence[int]) -> float:
        return float(self.row(state).max())

    def items(self) -> Iterator[tuple[tuple[RLState, int], float]]:
        return iter(sorted(self._values.items()))

    def states(self) -> list[RLState]:
        return sorted({s for s, _ in self._values})

    def copy(self) -> "QTable":
        return QTable(self.n_actions, dict(self._values))

    def __len__(self) -> int:
        return len(self._values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QTable):
            return NotImplemented
        return self.n_actions == other.n_actions and self._values == other._values

    def to_frame(self) -> pd.DataFrame:
        rows = [(*state, action, value) for (state, action), value in self.items()]
        return pd.DataFrame(rows, columns=[*STATE_FIELDS, "action", "value"])

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"{QTABLE_HEADER}\n# n_actions={self.n_actions}\n")
            self.to_frame().to_csv(f, index=False, lineterminator="\n")
        return path

    @classmethod
    def load(cls, path: Path | str) -> "QTable":
        path = Path(path)
        meta = _read_meta(path, QTABLE_HEADER)
        if "n_actions" not in meta:
            raise TrainingError(f"{path}: missing n_actions")
        frame = pd.read_csv(path, comment="#")
        table = cls(int(meta["n_actions"]))
        for row in frame.itertuples(index=False):
            state = RLState(int(row.load_level), int(row.chain_position), int(row.latency_bucket))
            table.set(state, int(row.action), float(row.value))
        return table


class ExperiencePool:
    """Bounded FIFO of transitions; the oldest entry is evicted first."""

    def __init__(self, capacity: int = 10_000, transitions: Iterable[Transition] = ()):
        if capacity < 1:
            raise DomainError("pool capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Transition] = deque(transitions, maxlen=capacity)

    def append(self, transition: Transition) -> None:
        self._items.append(transition)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Transition]:
        return iter(self._items)

    def to_frame(self) -> pd.DataFrame:
        rows = [(*t.state, t.action, t.reward, *t.next_state, t.next_action) for t in self._items]
        columns = [*STATE_FIELDS, "action", "reward", *(f"next_{f}" for f in STATE_FIELDS), "next_action"]
        return pd.DataFrame(rows, columns=columns)

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"{POOL_HEADER}\n# capacity={self.capacity}\n")
            self.to_frame().to_csv(f, index=False, lineterminator="\n")
        return path

    @classmethod
    def load(cls, path: Path | str) -> "ExperiencePool":
        path = Path(path)
        meta = _read_meta(path, POOL_HEADER)
        frame = pd.read_csv(path, comment="#")
        transitions = [
            Transition(
                state=RLState(int(r.load_level), int(r.chain_position), int(r.latency_bucket)),
                action=int(r.action),
                reward=float(r.reward),
                next_state=RLState(int(r.next_load_level), int(r.next_chain_position), int(r.next_latency_bucket)),
                next_action=int(r.next_action),
            )
            for r in frame.itertuples(index=False)
        ]
        capacity = int(meta.get("capacity", max(len(transitions), 1)))
        return cls(capacity=capacity, transitions=transitions)


# -----------------------------
# Update rules
# -----------------------------
def _check_rates(alpha: float, gamma: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha {alpha} outside (0, 1]")
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma {gamma} outside [0, 1]")


def sarsa_update(q: QTable, transition: Transition, alpha: float, gamma: float) -> QTable:
    """Q(s,a) += alpha * (R + gamma * Q(s',a') - Q(s,a)); updates ``q`` in place."""
    _check_rates(alpha, gamma)
    s, a, reward, s_next, a_next = transition
    if not math.isfinite(reward):
        raise NumericError(f"non-finite reward {reward}")
    current = q.get(s, a)
    target = reward + gamma * q.get(s_next, a_next)
    q.set(s, a, current + alpha * (target - current))
    return q


def q_learning_update(
    q: QTable, s: RLState, a: int, reward: float, s_next: RLState, alpha: float, gamma: float
) -> QTable:
    """Q(s,a) += alpha * (R + gamma * max_a' Q(s',a') - Q(s,a)); in place."""
    _check_rates(alpha, gamma)
    if not math.isfinite(reward):
        raise NumericError(f"non-finite reward {reward}")
    current = q.get(s, a)
    target = reward + gamma * q.max(s_next)
    q.set(s, a, current + alpha * (target - current))
    return q


def select_action(
    q: QTable, state: RLState, actions: int | Sequence[object], epsilon: float, rng: np.random.Generator
) -> int:
    """Epsilon-greedy choice; greedy ties go to the lowest action index."""
    n = actions if isinstance(actions, int) else len(actions)
    if n < 1:
        raise DomainError("cannot select from an empty action set")
    if n > q.n_actions:
        raise DomainError("action set is larger than the Q table")
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError(f"epsilon {epsilon} outside [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(n))
    return int(np.argmax(q.row(state)[:n]))


def offline_train(
    pool: ExperiencePool | Sequence[Transition],
    q: QTable,
    alpha: float,
    gamma: float,
    epochs: int = 1,
) -> QTable:
    """Replay the pool through sarsa_update, in insertion order, ``epochs`` times."""
    if len(pool) == 0:
        raise TrainingError("experience pool is empty")
    if epochs < 1:
        raise DomainError("epochs must be >= 1")
    for epoch in range(epochs):
        for transition in pool:
            sarsa_update(q, transition, alpha, gamma)
        logger.debug("offline epoch %d/%d done, %d entries", epoch + 1, epochs, len(q))
    return q
