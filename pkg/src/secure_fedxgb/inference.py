"""Partially-saved vertical models and federated prediction.

A party's partial model keeps the full tree topology, but a split node's
feature name and threshold are written only in its owner's file; every
other party sees the owner id and a ``nan`` threshold. Leaf values are
kept by the active party alone.

Prediction runs in two steps: each party evaluates the split nodes it
owns for every row and ships ``node_id -> direction bits`` to the active
party, which walks the trees and sums the leaves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataset import PartyShard
from .gbdt import FORMAT_VERSION, Forest, Tree, TreeNode, dumps_artifact, sigmoid

PARTIAL_FORMAT = "secure-fedxgb-partial"


class InferenceError(ValueError):
    pass


@dataclass
class PartialModel:
    party_id: int
    is_active: bool
    trees: list[Tree]
    learning_rate: float
    base_score: float

    def to_dict(self) -> dict:
        return {
            "format": PARTIAL_FORMAT,
            "version": FORMAT_VERSION,
            "party": self.party_id,
            "active": self.is_active,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return dumps_artifact(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> PartialModel:
        d = json.loads(text)
        if d.get("format") != PARTIAL_FORMAT or d.get("version") != FORMAT_VERSION:
            raise InferenceError(f"not a partial model file (format {d.get('format')!r})")
        return cls(d["party"], d["active"], [Tree.from_dict(t) for t in d["trees"]],
                   d["learning_rate"], d["base_score"])

    def owned_nodes(self) -> set[tuple[int, int]]:
        return {(t, n.node_id) for t, tree in enumerate(self.trees) for n in tree.nodes
                if not n.is_leaf and n.owner == self.party_id}


def save_partial(global_forest: Forest, owned_features: Sequence[str], party_id: int,
                 is_active: bool, feature_owner: Mapping[str, int]) -> PartialModel:
    """Mask *global_forest* down to what *party_id* may keep.

    *feature_owner* maps every split feature to its owning party; it is
    needed so foreign nodes can name their owner.
    """
    owned = set(owned_features)
    trees = []
    for tree in global_forest.trees:
        nodes = []
        for n in tree.nodes:
            if n.is_leaf:
                nodes.append(TreeNode(n.node_id, n.depth, weight=n.weight if is_active else None))
                continue
            if n.feature not in feature_owner:
                raise InferenceError(f"no owner known for feature {n.feature!r}")
            owner = feature_owner[n.feature]
            mine = n.feature in owned
            if mine != (owner == party_id):
                raise InferenceError(f"ownership of {n.feature!r} is inconsistent")
            nodes.append(TreeNode(
                n.node_id, n.depth,
                feature=n.feature if mine else None,
                threshold=n.threshold if mine else None,
                left=n.left, right=n.right, owner=owner,
            ))
        trees.append(Tree(nodes, tree.scale))
    return PartialModel(party_id, is_active, trees, global_forest.learning_rate,
                        global_forest.base_score)


def assemble_forest(active_view: Forest,
                    records: Mapping[int, Mapping[tuple[int, int], tuple[str, float]]]) -> Forest:
    """Fill the foreign splits of the active party's trees from each owner's private records.

    This is the evaluation view that no single party holds; it exists so
    the federated result can be compared against a centralized model.
    """
    trees = []
    for t, tree in enumerate(active_view.trees):
        nodes = []
        for n in tree.nodes:
            feature, threshold = n.feature, n.threshold
            if not n.is_leaf and feature is None:
                rec = records.get(n.owner, {}).get((t, n.node_id))
                if rec is None:
                    raise InferenceError(f"tree {t} node {n.node_id}: owner {n.owner} has no record")
                feature, threshold = rec
            nodes.append(TreeNode(n.node_id, n.depth, feature, threshold, n.left, n.right, n.weight,
                                  n.feature_index, n.cut_index))
        trees.append(Tree(nodes, tree.scale))
    return Forest(trees, active_view.learning_rate, active_view.base_score)


def merge_partials(partials: Sequence[PartialModel]) -> Forest:
    """Rebuild the global forest from a complete set of partial models."""
    active = _the_active(partials)
    records = {}
    for pm in partials:
        records[pm.party_id] = {
            (t, n.node_id): (n.feature, n.threshold)
            for t, tree in enumerate(pm.trees) for n in tree.nodes
            if not n.is_leaf and n.owner == pm.party_id
        }
    view = Forest(
        [Tree([TreeNode(n.node_id, n.depth, None, None, n.left, n.right, n.weight, owner=n.owner)
               for n in tree.nodes], tree.scale) for tree in active.trees],
        active.learning_rate, active.base_score,
    )
    return assemble_forest(view, records)


def _the_active(partials: Sequence[PartialModel]) -> PartialModel:
    actives = [p for p in partials if p.is_active]
    if len(actives) != 1:
        raise InferenceError(f"expected exactly one active partial model, got {len(actives)}")
    return actives[0]


def check_coverage(partials: Sequence[PartialModel]) -> None:
    """Every split node must be materialized by exactly one present party."""
    active = _the_active(partials)
    owners: dict[tuple[int, int], list[int]] = {}
    for pm in partials:
        if len(pm.trees) != len(active.trees):
            raise InferenceError(f"party {pm.party_id} has {len(pm.trees)} trees, active has {len(active.trees)}")
        for key in pm.owned_nodes():
            owners.setdefault(key, []).append(pm.party_id)
    for t, tree in enumerate(active.trees):
        for n in tree.nodes:
            if n.is_leaf:
                continue
            got = owners.get((t, n.node_id), [])
            if len(got) != 1:
                raise InferenceError(
                    f"tree {t} node {n.node_id} is resolved by {len(got)} parties (owner {n.owner})"
                )


def direction_bits(pm: PartialModel, shard: PartyShard) -> dict[tuple[int, int], np.ndarray]:
    """``value < threshold`` for each row at every split node *pm* owns."""
    data = shard.data
    col = {name: i for i, name in enumerate(data.feature_names)}
    out = {}
    for t, tree in enumerate(pm.trees):
        for n in tree.nodes:
            if n.is_leaf or n.owner != pm.party_id:
                continue
            if n.feature not in col or n.threshold is None:
                raise InferenceError(f"party {pm.party_id} cannot evaluate its node {n.node_id}")
            out[(t, n.node_id)] = data.X[:, col[n.feature]] < n.threshold
    return out


def federated_predict(partial_models: Sequence[PartialModel],
                      shards: Mapping[int, PartyShard] | Sequence[PartyShard]) -> np.ndarray:
    """Probability per row, combining every party's local split decisions."""
    if not isinstance(shards, Mapping):
        shards = {s.party_id: s for s in shards}
    check_coverage(partial_models)
    active = _the_active(partial_models)
    n_rows = None
    for s in shards.values():
        if n_rows is None:
            n_rows, ref = s.data.n_rows, s.data.row_ids
        elif not np.array_equal(s.data.row_ids, ref):
            raise InferenceError("shards do not share row ids")
    bits: dict[tuple[int, int], np.ndarray] = {}
    for pm in partial_models:
        if pm.party_id not in shards:
            if pm.owned_nodes():
                raise InferenceError(f"no data for party {pm.party_id}")
            continue
        bits.update(direction_bits(pm, shards[pm.party_id]))

    forest = Forest(active.trees, active.learning_rate, active.base_score)
    margin = np.full(n_rows, forest.base_margin)
    for t, tree in enumerate(active.trees):
        def goes_left(node, rows, t=t):
            return bits[(t, node.node_id)][rows]

        leaves = tree.leaf_index(goes_left, n_rows)
        margin = margin + forest.contribution(tree, tree.leaf_values(leaves))
    return sigmoid(margin)
