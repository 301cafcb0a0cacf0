"""Histogram-based gradient boosted trees for binary logistic loss.

This trainer is the centralized baseline, and its :class:`TreeGrower` is
the split-finding engine reused by every federated mode. Only the way
histograms are gathered and rows are partitioned differs between modes.

Gradients are snapped to a ``2**-GRID_BITS`` fixed-point grid before any
histogram is built. Sums of grid values stay exact in float64 (for fewer
than ``2**22`` rows), so a histogram has the same bits no matter which
party sums it, in what order, or whether it passed through encryption.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .dataset import DataError, DataMatrix, bin_column, compute_cuts

GRID_BITS = 30
MAX_ROWS = 1 << 22
FORMAT_VERSION = 1


class TrainError(ValueError):
    pass


@dataclass
class TrainParams:
    num_trees: int = 10
    max_depth: int = 5
    max_bin: int = 256
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    gamma: float = 0.0
    base_score: float = 0.5
    trees_per_round: int = 1

    def __post_init__(self):
        if self.num_trees < 1:
            raise TrainError("num_trees must be >= 1")
        if self.max_depth < 1:
            raise TrainError("max_depth must be >= 1")
        if self.max_bin < 2:
            raise TrainError("max_bin must be >= 2")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise TrainError("lambda and gamma must be >= 0")
        if not 0.0 < self.base_score < 1.0:
            raise TrainError("base_score must lie in (0, 1)")
        if self.trees_per_round < 1:
            raise TrainError("trees_per_round must be >= 1")

    @property
    def base_margin(self) -> float:
        return math.log(self.base_score / (1.0 - self.base_score))

    def to_dict(self) -> dict:
        return {
            "num_trees": self.num_trees,
            "max_depth": self.max_depth,
            "max_bin": self.max_bin,
            "learning_rate": self.learning_rate,
            "reg_lambda": self.reg_lambda,
            "gamma": self.gamma,
            "base_score": self.base_score,
            "trees_per_round": self.trees_per_round,
        }


# ---------------------------------------------------------------------------
# gradients, histograms, splits


def sigmoid(margin):
    return 1.0 / (1.0 + np.exp(-np.asarray(margin, dtype=np.float64)))


def compute_gradients(labels, probabilities) -> np.ndarray:
    """Logistic-loss gradient pairs, shape ``(n, 2)``: ``g = p - y``, ``h = p(1 - p)``."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(probabilities, dtype=np.float64)
    if y.shape != p.shape:
        raise TrainError(f"{y.shape[0]} labels but {p.shape[0]} probabilities")
    return np.column_stack([p - y, p * (1.0 - p)])


def quantize_gh(gh: np.ndarray, bits: int = GRID_BITS) -> np.ndarray:
    return np.ldexp(np.rint(np.ldexp(gh, bits)), -bits)


def build_histogram(binned: np.ndarray, gh: np.ndarray, rows, max_bin: int) -> np.ndarray:
    """Per-feature, per-bin ``(G, H)`` sums over *rows*; shape ``(n_features, max_bin, 2)``."""
    rows = np.asarray(rows, dtype=np.int64)
    n_features = binned.shape[1]
    hist = np.zeros((n_features, max_bin, 2), dtype=np.float64)
    if rows.size == 0:
        return hist
    sub = binned[rows]
    if sub.size and sub.max() >= max_bin:
        raise TrainError(f"bin index {int(sub.max())} >= max_bin {max_bin}")
    g = gh[rows, 0]
    h = gh[rows, 1]
    for f in range(n_features):
        hist[f, :, 0] = np.bincount(sub[:, f], weights=g, minlength=max_bin)
        hist[f, :, 1] = np.bincount(sub[:, f], weights=h, minlength=max_bin)
    return hist


@dataclass(frozen=True)
class SplitDecision:
    feature_index: int
    cut_index: int
    gain: float
    left_G: float
    left_H: float
    right_G: float
    right_H: float


def split_gains(histogram: np.ndarray, total_G: float, total_H: float, reg_lambda: float,
                gamma: float, n_cuts: Sequence[int] | None = None) -> np.ndarray:
    """Gain of every candidate split, shape ``(n_features, max_bin - 1)``; invalid entries are ``-inf``."""
    n_features, max_bin, _ = histogram.shape
    prefix = np.cumsum(histogram[:, :-1, :], axis=1)
    GL, HL = prefix[..., 0], prefix[..., 1]
    GR, HR = total_G - GL, total_H - HL
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (
            GL * GL / (HL + reg_lambda)
            + GR * GR / (HR + reg_lambda)
            - total_G * total_G / (total_H + reg_lambda)
        ) - gamma
    valid = np.isfinite(gain)
    if n_cuts is not None:
        valid &= np.arange(max_bin - 1)[None, :] < np.asarray(n_cuts)[:, None]
    return np.where(valid, gain, -np.inf)


def find_best_split(histogram: np.ndarray, total_G: float, total_H: float,
                    params: TrainParams, n_cuts: Sequence[int] | None = None) -> SplitDecision | None:
    """Best ``(feature, cut)`` by gain; first feature then first bin wins ties.

    Splitting at cut ``c`` sends bins ``0..c`` left. Returns ``None`` when
    no candidate has positive gain.
    """
    if histogram.shape[0] == 0 or histogram.shape[1] < 2:
        return None
    gains = split_gains(histogram, total_G, total_H, params.reg_lambda, params.gamma, n_cuts)
    flat = int(np.argmax(gains))
    f, c = divmod(flat, gains.shape[1])
    best = gains[f, c]
    if not best > 0.0:
        return None
    GL, HL = np.cumsum(histogram[f, :-1, :], axis=0)[c]
    return SplitDecision(int(f), int(c), float(best), float(GL), float(HL),
                         float(total_G - GL), float(total_H - HL))


def leaf_weight(G: float, H: float, reg_lambda: float) -> float:
    denom = H + reg_lambda
    if denom == 0:
        raise TrainError("H + lambda is zero; leaf weight undefined")
    return -G / denom + 0.0  # no negative zero in artifacts


# ---------------------------------------------------------------------------
# trees and forests


@dataclass
class TreeNode:
    node_id: int
    depth: int
    feature: str | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None
    weight: float | None = None
    feature_index: int | None = None
    cut_index: int | None = None
    owner: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"id": self.node_id, "depth": self.depth}
        if self.is_leaf:
            d["leaf"] = self.weight
            return d
        if self.owner is not None:
            d["owner"] = self.owner
        if self.feature is not None:
            d["feature"] = self.feature
        d["threshold"] = "nan" if self.threshold is None else self.threshold
        d["left"] = self.left
        d["right"] = self.right
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TreeNode:
        if "leaf" in d:
            return cls(d["id"], d["depth"], weight=d["leaf"])
        thr = d["threshold"]
        return cls(
            d["id"], d["depth"], feature=d.get("feature"),
            threshold=None if thr == "nan" else float(thr),
            left=d["left"], right=d["right"], owner=d.get("owner"),
        )


@dataclass
class Tree:
    nodes: list[TreeNode]
    scale: float = 1.0

    def to_dict(self) -> dict:
        return {"scale": self.scale, "nodes": [n.to_dict() for n in self.nodes]}

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        return cls([TreeNode.from_dict(n) for n in d["nodes"]], d.get("scale", 1.0))

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes)

    def leaf_index(self, goes_left: Callable[[TreeNode, np.ndarray], np.ndarray], n_rows: int) -> np.ndarray:
        """Node id reached by each row, given a per-node direction oracle."""
        at = np.zeros(n_rows, dtype=np.int64)
        pending = [(self.nodes[0], np.arange(n_rows))]
        while pending:
            node, rows = pending.pop()
            if node.is_leaf or rows.size == 0:
                at[rows] = node.node_id
                continue
            left = goes_left(node, rows)
            pending.append((self.nodes[node.left], rows[left]))
            pending.append((self.nodes[node.right], rows[~left]))
        return at

    def leaf_values(self, leaf_ids: np.ndarray) -> np.ndarray:
        table = np.array([n.weight if n.is_leaf else np.nan for n in self.nodes], dtype=np.float64)
        return table[leaf_ids]


@dataclass
class Forest:
    trees: list[Tree] = field(default_factory=list)
    learning_rate: float = 0.3
    base_score: float = 0.5

    @property
    def base_margin(self) -> float:
        return math.log(self.base_score / (1.0 - self.base_score))

    def contribution(self, tree: Tree, leaf_values: np.ndarray) -> np.ndarray:
        return (self.learning_rate * tree.scale) * leaf_values

    def to_dict(self) -> dict:
        return {
            "format": "secure-fedxgb-forest",
            "version": FORMAT_VERSION,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Forest:
        if d.get("format") != "secure-fedxgb-forest" or d.get("version") != FORMAT_VERSION:
            raise TrainError(f"unsupported forest artifact {d.get('format')!r} v{d.get('version')}")
        return cls([Tree.from_dict(t) for t in d["trees"]], d["learning_rate"], d["base_score"])

    def dumps(self) -> str:
        return dumps_artifact(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> Forest:
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def dumps_artifact(doc: dict) -> str:
    # repr-based float output round-trips exactly; field order is insertion order
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def route_by_threshold(X: np.ndarray, feature_names: Sequence[str]):
    col = {name: i for i, name in enumerate(feature_names)}

    def goes_left(node: TreeNode, rows: np.ndarray) -> np.ndarray:
        if node.feature not in col:
            raise TrainError(f"data has no feature {node.feature!r}")
        return X[rows, col[node.feature]] < node.threshold

    return goes_left


def predict_margin(forest: Forest, data: DataMatrix) -> np.ndarray:
    goes_left = route_by_threshold(data.X, data.feature_names)
    margin = np.full(data.n_rows, forest.base_margin)
    for tree in forest.trees:
        leaves = tree.leaf_index(goes_left, data.n_rows)
        margin = margin + forest.contribution(tree, tree.leaf_values(leaves))
    return margin


def predict(forest: Forest, data: DataMatrix) -> np.ndarray:
    """Positive-class probability for every row of *data*. Rows go left iff ``value < threshold``."""
    return sigmoid(predict_margin(forest, data))


def log_loss(labels, probabilities) -> float:
    p = np.clip(np.asarray(probabilities, dtype=np.float64), 1e-15, 1 - 1e-15)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


# ---------------------------------------------------------------------------
# growth


@dataclass
class PendingNode:
    node_id: int
    depth: int
    rows: Any
    G: float | None = None
    H: float | None = None


class TreeGrower:
    """Level-order tree growth over pluggable histogram and partition hooks.

    Subclasses (or the federated drivers) override :meth:`build_histograms`,
    :meth:`partition` and :meth:`describe_split`; everything that decides the
    tree's shape lives here and is shared by all modes.
    """

    def __init__(self, params: TrainParams, n_cuts: Sequence[int]):
        self.params = params
        self.n_cuts = np.asarray(n_cuts, dtype=np.int64)

    def build_histograms(self, level: list[PendingNode]) -> list[np.ndarray]:
        raise NotImplementedError

    def partition(self, node: PendingNode, split: SplitDecision,
                  left_id: int, right_id: int) -> tuple[Any, Any]:
        raise NotImplementedError

    def describe_split(self, tree_node: TreeNode, split: SplitDecision) -> None:
        raise NotImplementedError

    def on_leaf(self, node: PendingNode, tree_node: TreeNode) -> None:
        pass

    def root_totals(self, hist: np.ndarray | None) -> tuple[float, float]:
        # every row lands in exactly one bin of each feature
        if hist is None or hist.shape[0] == 0:
            raise TrainError("cannot derive node totals without a histogram")
        G, H = hist[0].sum(axis=0)
        return float(G), float(H)

    def grow(self, root_rows: Any) -> Tree:
        p = self.params
        nodes: list[TreeNode] = []
        level = [PendingNode(0, 0, root_rows)]
        nodes.append(TreeNode(0, 0))
        while level:
            expandable = [n for n in level if n.depth < p.max_depth]
            hists = self.build_histograms(expandable) if expandable else []
            by_id = {n.node_id: h for n, h in zip(expandable, hists)}
            nxt: list[PendingNode] = []
            for node in level:
                hist = by_id.get(node.node_id)
                if node.G is None:
                    node.G, node.H = self.root_totals(hist)
                split = None
                if hist is not None:
                    split = find_best_split(hist, node.G, node.H, p, self.n_cuts)
                tnode = nodes[node.node_id]
                if split is None:
                    tnode.weight = leaf_weight(node.G, node.H, p.reg_lambda)
                    self.on_leaf(node, tnode)
                    continue
                lid, rid = len(nodes), len(nodes) + 1
                tnode.feature_index, tnode.cut_index = split.feature_index, split.cut_index
                left_rows, right_rows = self.partition(node, split, lid, rid)
                nodes.append(TreeNode(lid, node.depth + 1))
                nodes.append(TreeNode(rid, node.depth + 1))
                tnode.left, tnode.right = lid, rid
                self.describe_split(tnode, split)
                nxt.append(PendingNode(lid, node.depth + 1, left_rows, split.left_G, split.left_H))
                nxt.append(PendingNode(rid, node.depth + 1, right_rows, split.right_G, split.right_H))
            level = nxt
        return Tree(nodes)


class LocalGrower(TreeGrower):
    """Grower over a fully local binned matrix (centralized and tree-based modes)."""

    def __init__(self, params, binned, cuts, feature_names, gh):
        super().__init__(params, [len(c) for c in cuts])
        self.binned = binned
        self.cuts = cuts
        self.feature_names = feature_names
        self.gh = gh
        self.leaf_of_row = np.zeros(binned.shape[0], dtype=np.int64)

    def build_histograms(self, level):
        return [build_histogram(self.binned, self.gh, n.rows, self.params.max_bin) for n in level]

    def partition(self, node, split, left_id, right_id):
        rows = node.rows
        left = self.binned[rows, split.feature_index] <= split.cut_index
        return rows[left], rows[~left]

    def describe_split(self, tree_node, split):
        tree_node.feature = self.feature_names[split.feature_index]
        tree_node.threshold = float(self.cuts[split.feature_index][split.cut_index])

    def on_leaf(self, node, tree_node):
        self.leaf_of_row[node.rows] = tree_node.node_id


def compute_all_cuts(data: DataMatrix, max_bin: int) -> list[np.ndarray]:
    return [compute_cuts(data.X[:, j], max_bin) for j in range(data.n_features)]


def bin_matrix(X: np.ndarray, cuts: Sequence[np.ndarray]) -> np.ndarray:
    if X.shape[1] == 0:
        return np.zeros((X.shape[0], 0), dtype=np.int32)
    return np.column_stack([bin_column(X[:, j], cuts[j]) for j in range(X.shape[1])]).astype(np.int32)


def check_rows(n_rows: int):
    if n_rows >= MAX_ROWS:
        raise TrainError(f"{n_rows} rows exceeds the exact-histogram limit of {MAX_ROWS}")


def boost_local(data: DataMatrix, params: TrainParams, forest: Forest, n_trees: int,
                cuts: Sequence[np.ndarray] | None = None, margin: np.ndarray | None = None,
                scale: float = 1.0) -> tuple[list[Tree], np.ndarray]:
    """Boost *n_trees* trees on *data* on top of *forest*'s current margins.

    Returns the new trees (not appended to *forest*) and the updated margins.
    """
    if data.label is None:
        raise DataError("training data has no label")
    check_rows(data.n_rows)
    if cuts is None:
        cuts = compute_all_cuts(data, params.max_bin)
    binned = bin_matrix(data.X, cuts)
    if margin is None:
        margin = predict_margin(forest, data)
    trees = []
    for _ in range(n_trees):
        gh = quantize_gh(compute_gradients(data.label, sigmoid(margin)))
        grower = LocalGrower(params, binned, cuts, data.feature_names, gh)
        tree = grower.grow(np.arange(data.n_rows))
        tree.scale = scale
        margin = margin + forest.contribution(tree, tree.leaf_values(grower.leaf_of_row))
        trees.append(tree)
    return trees, margin


def train_centralized(data: DataMatrix, params: TrainParams,
                      cuts: Sequence[np.ndarray] | None = None) -> Forest:
    """Train ``params.num_trees`` trees on the whole of *data*."""
    forest = Forest([], params.learning_rate, params.base_score)
    margin = np.full(data.n_rows, params.base_margin)
    trees, _ = boost_local(data, params, forest, params.num_trees, cuts=cuts, margin=margin)
    forest.trees.extend(trees)
    return forest
