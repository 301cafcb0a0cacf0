import random
import struct
from pathlib import Path

import numpy as np
import pytest

from secure_fedxgb import he
from secure_fedxgb.gbdt import build_histogram, quantize_gh
from secure_fedxgb.processor import (
    ACTIVE, PASSIVE, PEER, SERVER, AuthorizationError, BufferFormatError, CallKind, EncryptedGH,
    Kind, OpCounters, PaillierPlugin, PassthroughPlugin, ProcessorBuffer, ProcessorError,
    SplitRecord, accumulate_encrypted, add_encrypted_histograms, process_inbound,
    process_outbound,
)

GOLDEN = Path(__file__).parent / "golden"
PAIRS = np.array([[0.5, 0.25], [-0.125, 0.1875], [1.0, 0.0]])


def paillier(kp, private=True, seed=0, counters=None):
    return PaillierPlugin.for_keypair(kp, private, counters=counters or OpCounters(),
                                      rng=random.Random(seed))


def cts_bytes(cts):
    out = b""
    for c in cts:
        raw = c.to_bytes(max(1, (c.bit_length() + 7) // 8), "big")
        out += struct.pack("<I", len(raw)) + raw
    return out


class TestGolden:
    def test_three_pairs_passthrough(self):
        data = process_outbound(CallKind.BROADCAST, PAIRS, PassthroughPlugin(), ACTIVE)
        assert data == (GOLDEN / "gh_plain_3.bin").read_bytes()
        assert data[5] == Kind.GH_PAIRS_PLAIN

    def test_empty_gradient_vector(self):
        data = process_outbound(CallKind.BROADCAST, np.zeros((0, 2)), PassthroughPlugin(), ACTIVE)
        assert data == (GOLDEN / "gh_plain_empty.bin").read_bytes()
        assert len(data) == 22

    @pytest.mark.parametrize("name,call", [("histogram_plain.bin", CallKind.ALLREDUCE),
                                           ("agg_plain.bin", CallKind.RESULT)])
    def test_histograms(self, name, call):
        hist = (np.arange(24) / 4).reshape(2, 2, 3, 2)
        data = process_outbound(call, hist, PassthroughPlugin(), PEER if call == CallKind.ALLREDUCE else SERVER)
        assert data == (GOLDEN / name).read_bytes()
        assert np.array_equal(process_inbound(data, PassthroughPlugin(), PEER), hist)

    def test_cut_sync(self):
        data = process_outbound(CallKind.CUT_SYNC, [np.array([1.5, 2.5]), np.array([])],
                                PassthroughPlugin(), SERVER)
        assert data == (GOLDEN / "cut_sync.bin").read_bytes()
        back = process_inbound(data, PassthroughPlugin(), PEER)
        assert [c.tolist() for c in back] == [[1.5, 2.5], []]

    def test_tree_sync(self):
        mask = np.zeros(10, dtype=bool)
        mask[[0, 3, 9]] = True
        recs = [SplitRecord(0, 1, 1, 2, 5, mask), SplitRecord(1, 3, 0, 0, 0, None)]
        data = process_outbound(CallKind.TREE_SYNC, recs, PassthroughPlugin(), ACTIVE)
        assert data == (GOLDEN / "tree_sync.bin").read_bytes()
        back = process_inbound(data, PassthroughPlugin(), PASSIVE)
        assert np.array_equal(back[0].left_mask, mask) and back[1].left_mask is None
        assert (back[0].owner, back[0].cut_index, back[1].left_id) == (1, 5, 3)


class TestEncryptedBuffers:
    def test_three_pairs_paillier(self, keypair512):
        plugin = paillier(keypair512)
        data = process_outbound(CallKind.BROADCAST, PAIRS, plugin, ACTIVE)
        buf = ProcessorBuffer.from_bytes(data)
        assert buf.kind == Kind.GH_PAIRS_ENC and buf.n_samples == 3
        cts = buf.body.ciphertexts
        assert len(cts) == 6
        head = struct.pack("<4sBBIIII", b"SFXB", 1, 2, 3, 0, 0, 0)
        assert data == head + cts_bytes(cts)
        n = keypair512.public.n
        got = [he.decode_fixed(he.raw_decrypt(keypair512.private, c), 40, n) for c in cts]
        assert got == PAIRS.ravel().tolist()

    def test_packed_histogram_round_trip(self, keypair512):
        hist = quantize_gh(np.random.default_rng(0).normal(size=(2, 3, 4, 2)))
        sender = paillier(keypair512, private=False)
        data = process_outbound(CallKind.ALLREDUCE, hist, sender, PEER)
        assert data[5] == Kind.HISTOGRAM_ENC and data[22] == 1
        assert np.array_equal(process_inbound(data, paillier(keypair512), PEER), hist)

    def test_wire_stable_under_reserialization(self, keypair512):
        hist = np.ones((1, 2, 3, 2))
        data = process_outbound(CallKind.ALLREDUCE, hist, paillier(keypair512, False), PEER)
        assert ProcessorBuffer.from_bytes(data).to_bytes() == data


class TestErrors:
    def test_truncation_names_offset(self):
        golden = (GOLDEN / "gh_plain_3.bin").read_bytes()
        for k in (3, 21, 30, len(golden) - 1):
            with pytest.raises(BufferFormatError) as err:
                ProcessorBuffer.from_bytes(golden[:k])
            assert err.value.offset is not None
            assert str(err.value.offset) in str(err.value)

    def test_truncated_payload_offset_value(self):
        golden = (GOLDEN / "gh_plain_3.bin").read_bytes()
        with pytest.raises(BufferFormatError) as err:
            ProcessorBuffer.from_bytes(golden[:30])
        assert err.value.offset == 22  # the f64 block starts right after the header

    def test_trailing_bytes(self):
        golden = (GOLDEN / "gh_plain_3.bin").read_bytes()
        with pytest.raises(BufferFormatError):
            ProcessorBuffer.from_bytes(golden + b"\x00")

    @pytest.mark.parametrize("pos,value,match", [(0, ord("X"), "magic"), (4, 9, "version"),
                                                 (5, 42, "kind")])
    def test_bad_header(self, pos, value, match):
        data = bytearray((GOLDEN / "gh_plain_3.bin").read_bytes())
        data[pos] = value
        with pytest.raises(BufferFormatError, match=match):
            ProcessorBuffer.from_bytes(bytes(data))

    def test_payload_kind_mismatch(self):
        with pytest.raises(ProcessorError):
            process_outbound(CallKind.BROADCAST, np.zeros((3, 3)), PassthroughPlugin(), ACTIVE)
        with pytest.raises(ProcessorError):
            process_outbound("gossip", PAIRS, PassthroughPlugin(), ACTIVE)

    def test_only_active_broadcasts_gradients(self):
        with pytest.raises(AuthorizationError):
            process_outbound(CallKind.BROADCAST, PAIRS, PassthroughPlugin(), PASSIVE)


class TestAuthorization:
    def enc_hist(self, kp):
        return process_outbound(CallKind.ALLREDUCE, np.ones((1, 1, 2, 2)), paillier(kp, False), PEER)

    def test_server_decrypt_request_is_refused(self, keypair512):
        # even a server accidentally handed the private key must not decrypt
        with pytest.raises(AuthorizationError):
            process_inbound(self.enc_hist(keypair512), paillier(keypair512), SERVER, decrypt=True)

    def test_server_gets_ciphertext_by_default(self, keypair512):
        body = process_inbound(self.enc_hist(keypair512), paillier(keypair512, False), SERVER)
        assert not isinstance(body, np.ndarray)

    def test_public_only_plugin_cannot_decrypt(self, keypair512):
        with pytest.raises(AuthorizationError):
            process_inbound(self.enc_hist(keypair512), paillier(keypair512, False), PEER, decrypt=True)

    def test_gradients_never_decrypted(self, keypair512):
        data = process_outbound(CallKind.BROADCAST, PAIRS, paillier(keypair512), ACTIVE)
        with pytest.raises(AuthorizationError):
            process_inbound(data, paillier(keypair512), ACTIVE, decrypt=True)


class TestAccumulate:
    def encrypt(self, kp, gh, counters=None):
        plugin = paillier(kp, counters=counters)
        return plugin, plugin.encrypt_gh(gh)

    def test_singleton(self, keypair512):
        plugin, enc = self.encrypt(keypair512, np.array([[0.75, 0.1875]]))
        out = accumulate_encrypted(enc, np.array([[2]]), [np.array([0])], plugin.public_only(), 4)
        hist = plugin.decrypt_histogram(out)
        expect = np.zeros((1, 1, 4, 2))
        expect[0, 0, 2] = (0.75, 0.1875)
        assert np.array_equal(hist, expect)

    def test_matches_plaintext_builder(self, keypair512):
        binned = np.array([[0, 1], [1, 1], [1, 0], [0, 0]], dtype=np.int32)
        gh = quantize_gh(np.array([[0.5, 0.1], [-1.0, 0.2], [0.25, 0.3], [2.0, 0.4]]))
        plugin, enc = self.encrypt(keypair512, gh)
        nodes = [np.array([0, 1, 2, 3]), np.array([1, 3])]
        out = accumulate_encrypted(enc, binned, nodes, plugin.public_only(), 2)
        got = plugin.decrypt_histogram(out)
        for k, rows in enumerate(nodes):
            assert np.array_equal(got[k], build_histogram(binned, gh, rows, 2))

    def test_addition_counter_law(self, keypair512):
        rng = np.random.default_rng(1)
        M, J, K = 60, 3, 8
        binned = rng.integers(0, K, size=(M, J)).astype(np.int32)
        gh = quantize_gh(rng.normal(size=(M, 2)))
        counters = OpCounters()
        plugin, enc = self.encrypt(keypair512, gh, counters)
        assert counters.encryptions == 2 * M
        before = counters.snapshot()
        nodes = [np.arange(M), np.arange(0, M, 3)]
        accumulate_encrypted(enc, binned, nodes, plugin.public_only(counters), K)
        delta = counters.diff(before)
        expect = 0
        for rows in nodes:
            for f in range(J):
                occupied = len(set(binned[rows, f].tolist()))
                expect += (len(rows) - occupied) * 2
        assert delta["ciphertext_additions"] == expect
        # one fresh Enc(0) per empty (node, feature, bin) for g and for h
        empties = sum(K - len(set(binned[r, f].tolist())) for r in nodes for f in range(J))
        assert delta["zero_encryptions"] == 2 * empties

    def test_single_node_estimate_shape(self):
        # (M - K) * 2 * J when every bin is occupied
        M, K, J = 200_000, 256, 30
        assert (M - K) * 2 * J == 11_984_640
        assert M * 2 == 400_000

    def test_row_count_mismatch(self, keypair512):
        plugin, enc = self.encrypt(keypair512, np.zeros((3, 2)))
        with pytest.raises(ProcessorError, match="3"):
            accumulate_encrypted(enc, np.zeros((4, 1), dtype=np.int32), [np.arange(4)], plugin, 2)

    def test_passthrough_agrees(self):
        binned = np.array([[0], [1], [1]], dtype=np.int32)
        gh = np.array([[1.0, 0.5], [2.0, 0.25], [3.0, 0.125]])
        out = accumulate_encrypted(gh, binned, [np.arange(3)], PassthroughPlugin(), 2)
        assert out[0, 0].tolist() == [[1.0, 0.5], [5.0, 0.375]]


class TestAddHistograms:
    def test_single_payload_unchanged(self, keypair512):
        hist = paillier(keypair512).encrypt_histogram(np.ones((1, 1, 2, 2)))
        assert add_encrypted_histograms([hist], paillier(keypair512, False)) is hist

    def test_three_party_sum(self, keypair512):
        rng = np.random.default_rng(2)
        hists = [quantize_gh(rng.normal(size=(2, 3, 4, 2))) for _ in range(3)]
        enc = [paillier(keypair512, False, seed=i).encrypt_histogram(h) for i, h in enumerate(hists)]
        total = add_encrypted_histograms(enc, paillier(keypair512, False))
        assert np.array_equal(paillier(keypair512).decrypt_histogram(total), hists[0] + hists[1] + hists[2])

    def test_five_parties_eight_additions(self, keypair512):
        enc = [paillier(keypair512, False, seed=i).encrypt_histogram(np.ones((1, 2, 3, 2)))
               for i in range(5)]
        counters = OpCounters()
        server = paillier(keypair512, False, counters=counters)
        add_encrypted_histograms(enc, server)
        assert counters.vector_additions == (5 - 1) * 2 == 8

    def test_shape_mismatch(self, keypair512):
        a = paillier(keypair512, False).encrypt_histogram(np.ones((1, 2, 3, 2)))
        b = paillier(keypair512, False).encrypt_histogram(np.ones((1, 2, 4, 2)))
        with pytest.raises(ProcessorError):
            add_encrypted_histograms([a, b], paillier(keypair512, False))

    def test_key_mismatch(self, keypair512):
        other = he.keygen(512, rng_seed=77)
        a = paillier(keypair512, False).encrypt_histogram(np.ones((1, 1, 2, 2)))
        b = paillier(other, False).encrypt_histogram(np.ones((1, 1, 2, 2)))
        with pytest.raises(he.KeyMismatchError):
            add_encrypted_histograms([a, b], paillier(keypair512, False))

    def test_passthrough_transparency(self, keypair512):
        rng = np.random.default_rng(3)
        hists = [quantize_gh(rng.normal(size=(1, 2, 5, 2))) for _ in range(4)]
        plain = add_encrypted_histograms([PassthroughPlugin().encrypt_histogram(h) for h in hists],
                                         PassthroughPlugin())
        enc = add_encrypted_histograms([paillier(keypair512, False, seed=i).encrypt_histogram(h)
                                        for i, h in enumerate(hists)], paillier(keypair512, False))
        assert np.array_equal(paillier(keypair512).decrypt_histogram(enc), plain)


def test_counters_snapshot_and_diff():
    c = OpCounters()
    before = c.snapshot()
    c.add(encryptions=3, bytes_transferred=10)
    assert c.diff(before)["encryptions"] == 3 and c.diff(before)["decryptions"] == 0
    assert isinstance(EncryptedGH([1, 2]).n_samples, int)
