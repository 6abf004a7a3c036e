"""Call-graph construction, critical-chain search and critical-node classification."""

from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import joblib
import networkx as nx
import numpy as np
import pandas as pd
from sklearn.metrics import classification_report
from sklearn.tree import DecisionTreeClassifier

from src.errors import CyclicGraphError, DomainError, TraceParseError, TrainingError

logger = logging.getLogger(__name__)

SPAN_COLUMNS = ["trace_id", "parent_service", "service", "processing_time_ms"]
FEATURE_NAMES = ("latency", "cpu_util", "mem_util")

# weight sums closer than this are treated as equal when breaking ties
_TIE_TOLERANCE = 1e-9


# -----------------------------
# Call graph
# -----------------------------
@dataclass(frozen=True)
class Span:
    trace_id: str
    parent_service: str | None
    service: str
    processing_time: float

    def __post_init__(self) -> None:
        if not self.processing_time >= 0:
            raise DomainError(f"processing_time {self.processing_time} must be >= 0")


@dataclass(frozen=True, eq=False)
class CallGraph:
    nodes: frozenset[str]
    edges: Mapping[tuple[str, str], float]

    def __post_init__(self) -> None:
        for (src, dst), weight in self.edges.items():
            if src not in self.nodes or dst not in self.nodes:
                raise DomainError(f"edge {src}->{dst} references an unknown node")
            if not weight >= 0:
                raise DomainError(f"edge {src}->{dst} has negative weight {weight}")
        try:
            cycle = nx.find_cycle(self.to_networkx())
        except nx.NetworkXNoCycle:
            return
        raise CyclicGraphError([src for src, _ in cycle])

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str, float]], nodes: Iterable[str] = ()) -> "CallGraph":
        weights = {(src, dst): float(w) for src, dst, w in edges}
        all_nodes = set(nodes) | {n for pair in weights for n in pair}
        return cls(frozenset(all_nodes), weights)

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        graph.add_weighted_edges_from((src, dst, w) for (src, dst), w in self.edges.items())
        return graph

    def successors(self) -> dict[str, list[str]]:
        succ: dict[str, list[str]] = {n: [] for n in self.nodes}
        for src, dst in self.edges:
            succ[src].append(dst)
        return {n: sorted(s) for n, s in succ.items()}

    @property
    def roots(self) -> list[str]:
        targets = {dst for _, dst in self.edges}
        return sorted(n for n in self.nodes if n not in targets)


@dataclass(frozen=True)
class Chain:
    nodes: tuple[str, ...]
    total_latency: float


def build_call_graph(spans: Iterable[Span]) -> CallGraph:
    """One node per service; each edge weighs the mean processing time of
    the child spans observed under that parent."""
    nodes: set[str] = set()
    samples: dict[tuple[str, str], list[float]] = defaultdict(list)
    for span in spans:
        nodes.add(span.service)
        if span.parent_service is not None:
            nodes.add(span.parent_service)
            samples[(span.parent_service, span.service)].append(span.processing_time)
    if not nodes:
        raise DomainError("cannot build a call graph from zero spans")
    edges = {pair: float(np.mean(times)) for pair, times in samples.items()}
    return CallGraph(frozenset(nodes), edges)


def _improves(weight: float, path: tuple[str, ...], best: tuple[float, tuple[str, ...]] | None) -> bool:
    if best is None:
        return True
    best_weight, best_path = best
    if weight > best_weight + _TIE_TOLERANCE:
        return True
    return abs(weight - best_weight) <= _TIE_TOLERANCE and path < best_path


def critical_chain(graph: CallGraph) -> Chain:
    """Heaviest root-to-sink path by dynamic programming over a topological
    order; equal weights resolve to the lexicographically smallest path."""
    if not graph.nodes:
        raise DomainError("cannot search an empty call graph")
    succ = graph.successors()
    order = list(nx.lexicographical_topological_sort(graph.to_networkx()))

    # best[n] = heaviest path from n to any sink
    best: dict[str, tuple[float, tuple[str, ...]]] = {}
    for node in reversed(order):
        choice: tuple[float, tuple[str, ...]] | None = None
        for nxt in succ[node]:
            weight = graph.edges[(node, nxt)] + best[nxt][0]
            path = (node,) + best[nxt][1]
            if _improves(weight, path, choice):
                choice = (weight, path)
        best[node] = choice if choice is not None else (0.0, (node,))

    winner: tuple[float, tuple[str, ...]] | None = None
    for root in graph.roots:
        if _improves(best[root][0], best[root][1], winner):
            winner = best[root]
    assert winner is not None
    path = winner[1]
    total = sum((graph.edges[(a, b)] for a, b in zip(path, path[1:])), 0.0)
    return Chain(nodes=path, total_latency=total)


def load_spans(path: Path | str) -> list[Span]:
    """Read a span CSV; an empty parent_service marks a root span."""
    path = Path(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise DomainError(f"{path} is empty") from exc
    missing = [c for c in SPAN_COLUMNS if c not in raw.columns]
    if missing:
        raise TraceParseError(1, f"missing columns {missing}")

    times = pd.to_numeric(raw["processing_time_ms"].str.strip(), errors="coerce")
    bad = times.isna() | (times < 0) | (raw["service"].str.strip() == "")
    if bad.any():
        idx = int(bad.idxmax())
        raise TraceParseError(idx + 2, f"malformed span {raw.loc[idx].tolist()}")

    return [
        Span(
            trace_id=str(row.trace_id),
            parent_service=str(row.parent_service).strip() or None,
            service=str(row.service).strip(),
            processing_time=float(t),
        )
        for row, t in zip(raw.itertuples(index=False), times)
    ]


def request_distribution(spans: Iterable[Span]) -> dict[str, float]:
    """Each service's share of all observed calls."""
    services = pd.Series([s.service for s in spans], dtype=object)
    if services.empty:
        return {}
    shares = services.value_counts(normalize=True)
    ordered = sorted(shares.items(), key=lambda kv: (-kv[1], kv[0]))
    return {str(k): float(v) for k, v in ordered}


# -----------------------------
# Critical nodes
# -----------------------------
class NodeLabel(str, Enum):
    CRITICAL = "critical"
    NON_CRITICAL = "non_critical"


class RetrainDecision(str, Enum):
    KEEP = "keep"
    RETRAIN = "retrain"


@dataclass(frozen=True)
class NodeFeatures:
    latency: float
    cpu_util: float
    mem_util: float

    def __post_init__(self) -> None:
        if not self.latency >= 0:
            raise DomainError(f"latency {self.latency} must be >= 0")
        for name in ("cpu_util", "mem_util"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} {value} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.latency, self.cpu_util, self.mem_util)


@dataclass(frozen=True)
class LabeledSample:
    features: NodeFeatures
    label: NodeLabel


def critical_label(queue_delay_ms: float, service_time_ms: float, multiple: float = 2.0) -> NodeLabel:
    """A node is critical when it queues longer than ``multiple`` service times."""
    return NodeLabel.CRITICAL if queue_delay_ms > multiple * service_time_ms else NodeLabel.NON_CRITICAL


@dataclass(frozen=True)
class TreeLeaf:
    label: NodeLabel


@dataclass(frozen=True)
class TreeSplit:
    feature: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[TreeLeaf, TreeSplit]


@dataclass(frozen=True)
class DecisionTree:
    root: TreeNode
    max_depth: int
    degenerate: bool = False
    n_samples: int = 0

    def depth(self) -> int:
        def walk(node: TreeNode) -> int:
            if isinstance(node, TreeLeaf):
                return 0
            return 1 + max(walk(node.left), walk(node.right))

        return walk(self.root)

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        joblib.dump(self, path)
        return path

    @staticmethod
    def load(path: Path | str) -> "DecisionTree":
        tree = joblib.load(path)
        if not isinstance(tree, DecisionTree):
            raise TrainingError(f"{path} does not hold a DecisionTree")
        return tree


def _to_label(value: int) -> NodeLabel:
    return NodeLabel.CRITICAL if value == 1 else NodeLabel.NON_CRITICAL


def _convert(fitted: DecisionTreeClassifier, node: int = 0) -> TreeNode:
    tree = fitted.tree_
    left, right = tree.children_left[node], tree.children_right[node]
    if left == right:  # both -1 on leaves
        return TreeLeaf(_to_label(int(fitted.classes_[int(np.argmax(tree.value[node][0]))])))
    return TreeSplit(
        feature=int(tree.feature[node]),
        threshold=float(tree.threshold[node]),
        left=_convert(fitted, int(left)),
        right=_convert(fitted, int(right)),
    )


def train_tree(data: Sequence[LabeledSample], max_depth: int = 3, random_state: int = 0) -> DecisionTree:
    """Gini-impurity CART induction over (latency, cpu_util, mem_util).

    Single-class data yields a one-leaf tree flagged ``degenerate``.
    """
    if max_depth < 1:
        raise DomainError("max_depth must be >= 1")
    if len(data) == 0:
        raise TrainingError("cannot train a decision tree on zero samples")

    labels = {s.label for s in data}
    if len(labels) == 1:
        only = labels.pop()
        logger.warning("degenerate tree: all %d samples are %s", len(data), only.value)
        return DecisionTree(TreeLeaf(only), max_depth=max_depth, degenerate=True, n_samples=len(data))

    X = np.array([s.features.as_tuple() for s in data], dtype=float)
    y = np.array([1 if s.label is NodeLabel.CRITICAL else 0 for s in data])
    model = DecisionTreeClassifier(criterion="gini", max_depth=max_depth, random_state=random_state)
    model.fit(X, y)
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug(
            "critical-node tree on %d samples:\n%s",
            len(data),
            classification_report(y, model.predict(X), digits=4, zero_division=0),
        )
    return DecisionTree(_convert(model), max_depth=max_depth, n_samples=len(data))


def classify_node(tree: DecisionTree, features: NodeFeatures) -> NodeLabel:
    # strictly below the threshold descends left; a tie goes right
    x = features.as_tuple()
    node = tree.root
    while isinstance(node, TreeSplit):
        node = node.left if x[node.feature] < node.threshold else node.right
    return node.label


def misclassification_rate(tree: DecisionTree, samples: Sequence[LabeledSample]) -> float:
    if len(samples) == 0:
        raise DomainError("no samples to score")
    wrong = sum(classify_node(tree, s.features) is not s.label for s in samples)
    return wrong / len(samples)


def check_retrain(
    tree: DecisionTree, recent: Sequence[LabeledSample], error_threshold: float = 0.05
) -> RetrainDecision:
    if not 0.0 < error_threshold < 1.0:
        raise DomainError("error_threshold must lie in (0, 1)")
    rate = misclassification_rate(tree, recent)
    return RetrainDecision.RETRAIN if rate > error_threshold else RetrainDecision.KEEP


# -----------------------------
# Runtime handle
# -----------------------------
@dataclass
class ChainAnalyzer:
    """Tracks the critical chain and the critical-node tree during a run.

    Feature samples stay in per-service stores and are only pooled when the
    tree is (re)trained.
    """

    max_depth: int = 3
    retrain_threshold: float = 0.05
    span_window: int = 1
    static_chain: bool = False
    store_size: int = 200
    recent_size: int = 100
    min_recent: int = 50
    random_state: int = 0

    tree: DecisionTree | None = None
    chain: Chain | None = None
    retrain_count: int = 0
    _spans: deque = field(init=False, repr=False)
    _stores: dict = field(init=False, repr=False)
    _recent: deque = field(init=False, repr=False)
    _since_check: int = field(init=False, default=0, repr=False)

    def __post_init__(self) -> None:
        self._spans = deque(maxlen=self.span_window)
        self._stores = defaultdict(lambda: deque(maxlen=self.store_size))
        self._recent = deque(maxlen=self.recent_size)

    def observe(self, spans: Iterable[Span], samples: Mapping[str, LabeledSample]) -> None:
        self._spans.append(list(spans))
        for service, sample in samples.items():
            self._stores[service].append(sample)
            self._recent.append(sample)
            self._since_check += 1
        self._maybe_retrain()

    def _pooled(self) -> list[LabeledSample]:
        return [s for service in sorted(self._stores) for s in self._stores[service]]

    def _train(self, reason: str) -> None:
        data = self._pooled()
        self.tree = train_tree(data, max_depth=self.max_depth, random_state=self.random_state)
        self.retrain_count += 1
        self._recent.clear()
        self._since_check = 0
        logger.info("critical-node tree trained (%s) on %d samples", reason, len(data))

    def _maybe_retrain(self) -> None:
        if self.tree is None or self.tree.degenerate:
            labels = {s.label for store in self._stores.values() for s in store}
            if len(labels) == 2:
                self._train("initial")
            return
        # the recent window is scored once per min_recent fresh samples
        if len(self._recent) < self.min_recent or self._since_check < self.min_recent:
            return
        self._since_check = 0
        if check_retrain(self.tree, list(self._recent), self.retrain_threshold) is RetrainDecision.RETRAIN:
            self._train("error rate above threshold")

    def refresh_chain(self) -> Chain | None:
        if self.static_chain and self.chain is not None:
            return self.chain
        spans = [s for batch in self._spans for s in batch]
        if spans:
            self.chain = critical_chain(build_call_graph(spans))
        return self.chain

    def critical_node(self, features: Mapping[str, NodeFeatures]) -> tuple[str, int] | None:
        """The node to provision on the current chain, with its position.

        Among nodes the tree marks critical the slowest wins; with none
        marked, the slowest node on the chain is used.
        """
        if self.chain is None:
            return None
        candidates = [(pos, node) for pos, node in enumerate(self.chain.nodes) if node in features]
        if not candidates:
            return None
        if self.tree is not None:
            marked = [c for c in candidates if classify_node(self.tree, features[c[1]]) is NodeLabel.CRITICAL]
            candidates = marked or candidates
        pos, node = max(candidates, key=lambda c: (features[c[1]].latency, -c[0]))
        return node, pos

    def save_tree(self, path: Path | str) -> Path | None:
        return self.tree.save(path) if self.tree is not None else None
