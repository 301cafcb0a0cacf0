import json

import numpy as np
import pytest

from secure_fedxgb.dataset import DataMatrix, make_synthetic, split_vertical
from secure_fedxgb.federation import SecurityConfig, run_vertical_histogram
from secure_fedxgb.gbdt import Forest, TrainParams, Tree, TreeNode, predict, train_centralized
from secure_fedxgb.inference import (
    InferenceError, PartialModel, check_coverage, federated_predict, merge_partials, save_partial,
)


def nan_nodes(pm):
    return [n for t in pm.trees for n in t.nodes if not n.is_leaf and n.threshold is None]


def split_nodes(pm):
    return [n for t in pm.trees for n in t.nodes if not n.is_leaf]


@pytest.fixture(scope="module")
def wide():
    """20 features f1..f20, party 0 owns f1..f10, party 1 (active) owns f11..f20."""
    d = make_synthetic(300, 20, seed=6, positive_rate=0.3)
    names = [f"f{i}" for i in range(1, 21)]
    d = DataMatrix(names, d.X, d.label)
    shards = split_vertical(d, {0: names[:10], 1: names[10:]}, 1)
    res = run_vertical_histogram(shards, TrainParams(num_trees=3, max_depth=3, max_bin=16))
    return d, shards, res


class TestSavePartial:
    def test_full_ownership(self, wide):
        d, _, res = wide
        owner = {n: 0 for n in d.feature_names}
        pm = save_partial(res.forest, d.feature_names, 0, True, owner)
        assert not nan_nodes(pm)

    def test_no_ownership(self, wide):
        d, _, res = wide
        owner = {n: 1 for n in d.feature_names}
        pm = save_partial(res.forest, [], 0, False, owner)
        assert len(nan_nodes(pm)) == len(split_nodes(pm)) > 0

    def test_foreign_nodes_masked(self, wide):
        d, _, res = wide
        pm = res.partial_models[0]
        for t, tree in zip(pm.trees, res.forest.trees):
            for n, g in zip(t.nodes, tree.nodes):
                if g.is_leaf:
                    assert n.weight is None  # leaves stay with the active party
                    continue
                if int(g.feature[1:]) > 10:
                    assert n.threshold is None and n.feature is None and n.owner == 1
                else:
                    assert (n.feature, n.threshold, n.owner) == (g.feature, g.threshold, 0)
        assert nan_nodes(pm)
        assert '"threshold": "nan"' in pm.dumps()

    def test_unknown_owner(self, wide):
        _, _, res = wide
        with pytest.raises(InferenceError, match="no owner"):
            save_partial(res.forest, [], 0, False, {})

    def test_file_round_trip(self, wide):
        _, _, res = wide
        for pm in res.partial_models.values():
            assert PartialModel.loads(pm.dumps()).dumps() == pm.dumps()

    def test_rejects_forest_file(self, wide):
        _, _, res = wide
        with pytest.raises(InferenceError):
            PartialModel.loads(res.forest.dumps())


class TestLeakage:
    def test_passive_file_has_no_foreign_names_or_thresholds(self, wide):
        d, _, res = wide
        text = res.partial_models[0].dumps()
        foreign = {n.feature: n.threshold for t in res.forest.trees for n in t.nodes
                   if not n.is_leaf and int(n.feature[1:]) > 10}
        assert foreign
        for name, thr in foreign.items():
            assert f'"{name}"' not in text
            assert repr(thr) not in text
        doc = json.loads(text)
        leaves = [n for t in doc["trees"] for n in t["nodes"] if "leaf" in n]
        assert all(n["leaf"] is None for n in leaves)


class TestFederatedPredict:
    def test_equals_centralized_bitwise(self, wide):
        d, shards, res = wide
        central = train_centralized(d, TrainParams(num_trees=3, max_depth=3, max_bin=16))
        got = federated_predict(list(res.partial_models.values()), shards)
        assert got.tobytes() == predict(central, d).tobytes()

    def test_twenty_row_toy(self, keypair512):
        d = make_synthetic(20, 4, seed=8, positive_rate=0.4)
        shards = split_vertical(d, {0: ["f0", "f1"], 1: ["f2", "f3"]}, 0)
        p = TrainParams(num_trees=2, max_depth=2, max_bin=8)
        res = run_vertical_histogram(shards, p, SecurityConfig("paillier", 512, 0, keypair512))
        got = federated_predict(list(res.partial_models.values()), shards)
        assert got.tobytes() == predict(train_centralized(d, p), d).tobytes()

    def test_empty_forest(self):
        d = make_synthetic(5, 2, seed=0)
        shards = split_vertical(d, {0: ["f0"], 1: ["f1"]}, 1)
        pm = PartialModel(1, True, [], 0.3, 0.25)
        assert np.allclose(federated_predict([pm], shards), 0.25)

    def test_single_party_equals_local_predict(self):
        d = make_synthetic(80, 3, seed=2)
        shards = split_vertical(d, {0: d.feature_names}, 0)
        p = TrainParams(num_trees=2, max_depth=2, max_bin=8)
        res = run_vertical_histogram(shards, p)
        got = federated_predict([res.partial_models[0]], shards)
        assert got.tobytes() == predict(res.forest, d).tobytes()

    def test_missing_party(self, wide):
        _, shards, res = wide
        with pytest.raises(InferenceError, match="resolved by 0"):
            federated_predict([res.partial_models[1]], shards)

    def test_duplicate_ownership(self, wide):
        _, _, res = wide
        pm0 = res.partial_models[0]
        clone = PartialModel.loads(pm0.dumps())
        clone.party_id = 7
        for t in clone.trees:
            for n in t.nodes:
                if n.owner == 0:
                    n.owner = 7
        with pytest.raises(InferenceError, match="resolved by 2"):
            check_coverage([pm0, clone, res.partial_models[1]])

    def test_merge_recovers_global_forest(self, wide):
        _, _, res = wide
        merged = merge_partials(list(res.partial_models.values()))
        assert [[(n.feature, n.threshold, n.weight) for n in t.nodes] for t in merged.trees] == \
            [[(n.feature, n.threshold, n.weight) for n in t.nodes] for t in res.forest.trees]

    def test_hand_built_two_party(self):
        # party 0 owns a, party 1 (active) owns b; root on a, right child on b
        nodes = [TreeNode(0, 0, "a", 1.0, 1, 2), TreeNode(1, 1, weight=-1.0),
                 TreeNode(2, 1, "b", 4.0, 3, 4), TreeNode(3, 2, weight=0.5), TreeNode(4, 2, weight=2.0)]
        forest = Forest([Tree(nodes)], 0.1, 0.5)
        owner = {"a": 0, "b": 1}
        parts = [save_partial(forest, ["a"], 0, False, owner), save_partial(forest, ["b"], 1, True, owner)]
        d = DataMatrix(["a", "b"], np.array([[0.0, 5.0], [2.0, 1.0], [2.0, 9.0]]), np.array([0, 1, 1.0]))
        shards = split_vertical(d, {0: ["a"], 1: ["b"]}, 1)
        assert federated_predict(parts, shards).tobytes() == predict(forest, d).tobytes()
