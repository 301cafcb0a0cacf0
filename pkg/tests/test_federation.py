import numpy as np
import pytest

from secure_fedxgb.dataset import PartyShard, make_synthetic, split_horizontal, split_vertical
from secure_fedxgb.federation import (
    FederationError, SecurityConfig, Transcript, label_probe, run_bagging, run_cyclic,
    run_horizontal_histogram, run_vertical_histogram,
)
from secure_fedxgb.gbdt import TrainParams, predict_margin, train_centralized
from secure_fedxgb.processor import Kind

PARAMS = TrainParams(num_trees=2, max_depth=3, max_bin=16)


@pytest.fixture(scope="module")
def data():
    return make_synthetic(240, 6, seed=11, positive_rate=0.3, integer_features=2)


@pytest.fixture(scope="module")
def secure(keypair512):
    return SecurityConfig("paillier", 512, seed=5, keypair=keypair512)


def vsplit(d, active=1):
    return split_vertical(d, {0: d.feature_names[:2], 1: d.feature_names[2:]}, active)


def assert_six_steps(transcript: Transcript):
    """Every message: one outbound, then per receiver a transport step directly followed by inbound."""
    entries = transcript.entries
    i = 0
    assert entries
    while i < len(entries):
        out = entries[i]
        assert out.step == "outbound"
        receivers = out.receiver.split(",")
        i += 1
        for r in receivers:
            t, inn = entries[i], entries[i + 1]
            assert (t.step, inn.step) == ("transport", "inbound")
            assert t.receiver == inn.receiver == r
            assert t.data == inn.data == out.data
            i += 2


class TestVertical:
    def test_passthrough_equals_centralized(self, data):
        res = run_vertical_histogram(vsplit(data), PARAMS)
        assert res.forest.dumps() == train_centralized(data, PARAMS).dumps()

    def test_paillier_equals_centralized(self, data, secure):
        res = run_vertical_histogram(vsplit(data), PARAMS, secure)
        assert res.forest.dumps() == train_centralized(data, PARAMS).dumps()

    def test_partial_models_differ_per_party(self, data, secure):
        res = run_vertical_histogram(vsplit(data), PARAMS, secure)
        a, b = res.partial_models[0].dumps(), res.partial_models[1].dumps()
        assert a != b

    def test_active_owns_everything(self, data):
        shards = split_vertical(data, {0: data.feature_names}, 0)
        res = run_vertical_histogram(shards, PARAMS)
        assert res.forest.dumps() == train_centralized(data, PARAMS).dumps()
        assert res.counters.encryptions == 0 and len(res.transcript.entries) == 0

    def test_three_parties(self, data, secure):
        names = data.feature_names
        shards = split_vertical(data, {0: names[:1], 1: names[1:4], 2: names[4:]}, 2)
        res = run_vertical_histogram(shards, PARAMS, secure)
        assert res.forest.dumps() == train_centralized(data, PARAMS).dumps()

    def test_counter_law_encryptions(self, data, secure):
        res = run_vertical_histogram(vsplit(data), PARAMS, secure)
        for rc in res.round_counters:
            assert rc["encryptions"] == 2 * data.n_rows

    def test_zero_active(self, data):
        shards = vsplit(data)
        shards[1] = PartyShard(1, "passive", shards[1].data.select_columns(
            shards[1].data.feature_names, keep_label=False), shards[1].feature_indices)
        with pytest.raises(FederationError, match="exactly one active"):
            run_vertical_histogram(shards, PARAMS)

    def test_two_active(self, data):
        shards = vsplit(data)
        shards[0] = PartyShard(0, "active", shards[0].data, shards[0].feature_indices)
        with pytest.raises(FederationError, match="exactly one active"):
            run_vertical_histogram(shards, PARAMS)

    def test_six_step_transcript(self, data, secure):
        assert_six_steps(run_vertical_histogram(vsplit(data), PARAMS, secure).transcript)

    def test_passive_sees_no_plaintext_gradients(self, data, secure):
        res = run_vertical_histogram(vsplit(data), PARAMS, secure)
        kinds = {e.kind for e in res.transcript.received_by("party0")}
        assert Kind.GH_PAIRS_PLAIN.name not in kinds and Kind.GH_PAIRS_ENC.name in kinds


class TestLabelProbe:
    def test_plaintext_leaks_secure_does_not(self, keypair512):
        d = make_synthetic(400, 4, seed=2, positive_rate=0.5)
        shards = vsplit(d)
        plain = run_vertical_histogram(shards, TrainParams(num_trees=1, max_depth=1, max_bin=8))
        guess = label_probe(plain.transcript, "party0", d.n_rows)
        assert np.mean(guess == d.label) == 1.0
        sec = run_vertical_histogram(shards, TrainParams(num_trees=1, max_depth=1, max_bin=8),
                                     SecurityConfig("paillier", 512, seed=1, keypair=keypair512))
        guess = label_probe(sec.transcript, "party0", d.n_rows)
        acc = np.mean(guess == d.label)
        # binomial(400, 0.5): 4 standard deviations is 0.1
        assert abs(acc - 0.5) < 0.1


class TestHorizontal:
    def test_single_party_equals_centralized(self, data):
        shard = PartyShard(0, "peer", data, list(range(data.n_features)))
        res = run_horizontal_histogram([shard], PARAMS)
        assert res.forest.dumps() == train_centralized(data, PARAMS).dumps()

    def test_paillier_equals_passthrough(self, data, secure):
        shards = split_horizontal(data, 3)
        a = run_horizontal_histogram(shards, PARAMS)
        b = run_horizontal_histogram(shards, PARAMS, secure)
        assert a.forest.dumps() == b.forest.dumps()
        assert all(f.dumps() == b.forest.dumps() for f in b.party_forests.values())

    def test_equals_centralized_on_merged_cuts(self, data):
        shards = split_horizontal(data, 3)
        res = run_horizontal_histogram(shards, PARAMS)
        assert res.forest.dumps() == train_centralized(data, PARAMS, cuts=res.cuts).dumps()

    def test_counter_law_per_node(self, data, secure):
        shards = split_horizontal(data, 3)
        res = run_horizontal_histogram(shards, TrainParams(num_trees=1, max_depth=1, max_bin=16), secure)
        rc = res.round_counters[0]
        assert rc["vector_encryptions"] == 2 * 3
        assert rc["vector_additions"] == 2 * (3 - 1)

    def test_threads_byte_identical(self, data, secure):
        shards = split_horizontal(data, 3)
        a = run_horizontal_histogram(shards, PARAMS, secure)
        b = run_horizontal_histogram(shards, PARAMS, secure, threads=3)
        assert a.forest.dumps() == b.forest.dumps()

    def test_overlapping_rows(self, data):
        s = split_horizontal(data, 2)
        with pytest.raises(FederationError, match="shares rows"):
            run_horizontal_histogram([s[0], PartyShard(1, "peer", s[0].data, s[0].feature_indices)], PARAMS)

    def test_six_step_transcript(self, data, secure):
        assert_six_steps(run_horizontal_histogram(split_horizontal(data, 2), PARAMS, secure).transcript)

    def test_server_never_sees_plaintext_histograms(self, data, secure):
        res = run_horizontal_histogram(split_horizontal(data, 2), PARAMS, secure)
        kinds = {e.kind for e in res.transcript.received_by("server")}
        assert kinds <= {Kind.HISTOGRAM_ENC.name, Kind.CUT_SYNC.name}



class TestCyclic:
    def test_single_party(self, data):
        shard = PartyShard(0, "peer", data, list(range(data.n_features)))
        assert run_cyclic([shard], PARAMS).forest.dumps() == train_centralized(data, PARAMS).dumps()

    def test_alternating_parties(self, data):
        shards = split_horizontal(data, 2)
        p = TrainParams(num_trees=4, max_depth=2, max_bin=16)
        res = run_cyclic(shards, p)
        assert len(res.forest.trees) == 4
        trained_by = {}
        for e in res.transcript.entries:
            if e.step == "outbound" and e.kind == "MODEL":
                for t in e.meta["trees"]:
                    trained_by[t] = e.meta["trained_by"]
        assert trained_by == {0: 0, 1: 1, 2: 0, 3: 1}

    def test_identical_shards(self):
        d = make_synthetic(100, 4, seed=1)
        a = PartyShard(0, "peer", d, list(range(4)))
        b = PartyShard(1, "peer", d.select_rows(slice(None)), list(range(4)))
        b.data.row_ids = b.data.row_ids + 1000
        p = TrainParams(num_trees=3, max_depth=2, max_bin=16)
        assert run_cyclic([a, b], p).forest.dumps() == train_centralized(d, p).dumps()

    def test_trees_per_round(self, data):
        p = TrainParams(num_trees=5, max_depth=2, max_bin=16, trees_per_round=2)
        res = run_cyclic(split_horizontal(data, 2), p)
        assert len(res.forest.trees) == 5 and len(res.round_counters) == 3


class TestBagging:
    def test_single_party(self, data):
        shard = PartyShard(0, "peer", data, list(range(data.n_features)))
        assert run_bagging([shard], PARAMS).forest.dumps() == train_centralized(data, PARAMS).dumps()

    def test_structure_and_order(self, data):
        p = TrainParams(num_trees=2, max_depth=2, max_bin=16)
        res = run_bagging(split_horizontal(data, 3), p, num_rounds=2)
        assert len(res.forest.trees) == 6
        assert all(t.scale == pytest.approx(1 / 3) for t in res.forest.trees)
        order = [(e.meta["round"], e.meta["party"]) for e in res.transcript.entries
                 if e.step == "outbound" and e.sender != "server"]
        assert order == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]

    def test_identical_shards_give_identical_layer_trees(self):
        d = make_synthetic(90, 4, seed=4)
        shards = []
        for pid in range(3):
            s = PartyShard(pid, "peer", d.select_rows(slice(None)), list(range(4)))
            s.data.row_ids = s.data.row_ids + 1000 * pid
            shards.append(s)
        res = run_bagging(shards, TrainParams(num_trees=2, max_depth=2, max_bin=16))
        trees = [t.to_dict() for t in res.forest.trees]
        assert trees[0] == trees[1] == trees[2]
        assert trees[3] == trees[4] == trees[5]

    def test_threads_byte_identical(self, data):
        shards = split_horizontal(data, 3)
        assert run_bagging(shards, PARAMS).forest.dumps() == \
            run_bagging(shards, PARAMS, threads=3).forest.dumps()

    def test_layer_margin_is_mean_of_party_updates(self, data):
        shards = split_horizontal(data, 2)
        p = TrainParams(num_trees=1, max_depth=2, max_bin=16)
        bag = run_bagging(shards, p).forest
        solo = [train_centralized(s.data, p) for s in shards]
        m_bag = predict_margin(bag, data)
        m_solo = [predict_margin(f, data) for f in solo]
        assert np.allclose(m_bag, 0.5 * (m_solo[0] + m_solo[1]), rtol=0, atol=1e-12)
