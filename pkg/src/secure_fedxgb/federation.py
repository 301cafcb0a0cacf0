"""In-process simulator for the four collaboration modes.

Histogram-based modes exchange every message through the processor
boundary (:mod:`secure_fedxgb.processor`), so the bytes recorded in the
:class:`Transcript` are exactly what a network transport would carry.
Tree-based modes (cyclic, bagging) exchange serialized forests instead.
"""

from __future__ import annotations

import base64
import copy
import json
import random
import time
from types import SimpleNamespace
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import he
from .dataset import ACTIVE, PASSIVE, PEER, PartyShard, merge_cut_candidates
from .gbdt import (
    Forest, Tree, TrainParams, TreeGrower, bin_matrix, boost_local, build_histogram, check_rows,
    compute_all_cuts, compute_gradients, quantize_gh, sigmoid,
)
from .processor import (
    SERVER, CallKind, EncryptionPlugin, OpCounters, PaillierPlugin, PassthroughPlugin,
    SplitRecord, Kind, accumulate_encrypted, add_encrypted_histograms, process_inbound,
    process_outbound,
)

MODEL_KIND = "MODEL"


class FederationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# instrumentation


class PhaseTimer:
    """Exclusive wall time per named phase; nested phases pause their parent."""

    def __init__(self):
        self.totals: dict[str, float] = defaultdict(float)
        self._stack: list[str] = []
        self._mark = 0.0

    @contextmanager
    def __call__(self, phase: str):
        now = time.perf_counter()
        if self._stack:
            self.totals[self._stack[-1]] += now - self._mark
        self._stack.append(phase)
        self._mark = now
        try:
            yield
        finally:
            now = time.perf_counter()
            self.totals[self._stack.pop()] += now - self._mark
            self._mark = now


@dataclass
class TranscriptEntry:
    seq: int
    round: int
    step: str
    sender: str
    receiver: str
    kind: str
    n_bytes: int
    counters: dict[str, int]
    meta: dict[str, Any] = field(default_factory=dict)
    data: bytes = field(default=b"", repr=False)

    def to_record(self, include_payload: bool = False) -> dict:
        rec = {
            "seq": self.seq, "round": self.round, "step": self.step,
            "sender": self.sender, "receiver": self.receiver, "kind": self.kind,
            "n_bytes": self.n_bytes, "counters": self.counters,
        }
        if self.meta:
            rec["meta"] = self.meta
        if include_payload:
            rec["data"] = base64.b64encode(self.data).decode()
        return rec


class Transcript:
    """Append-only log of every message step."""

    def __init__(self):
        self.entries: list[TranscriptEntry] = []

    def append(self, entry: TranscriptEntry):
        self.entries.append(entry)

    def received_by(self, name: str) -> list[TranscriptEntry]:
        return [e for e in self.entries if e.step == "inbound" and e.receiver == name]

    def bytes_seen_by(self, name: str) -> bytes:
        return b"".join(e.data for e in self.received_by(name))

    def to_jsonl(self, path, include_payload: bool = False):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_record(include_payload)) + "\n")

    @staticmethod
    def read_jsonl(path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass
class Party:
    party_id: int
    role: str
    shard: PartyShard | None
    plugin: EncryptionPlugin

    @property
    def name(self) -> str:
        return SERVER if self.role == SERVER else f"party{self.party_id}"


def _kind_name(data: bytes) -> str:
    try:
        return Kind(data[5]).name
    except (IndexError, ValueError):
        return "UNKNOWN"


class Network:
    """In-memory transport. Each message is logged as outbound, transport and inbound steps."""

    def __init__(self, counters: OpCounters, transcript: Transcript, timer: PhaseTimer):
        self.counters = counters
        self.transcript = transcript
        self.timer = timer
        self.round = 0

    def _log(self, step, sender, receiver, kind, data, meta):
        self.transcript.append(TranscriptEntry(
            len(self.transcript.entries), self.round, step, sender, receiver, kind,
            len(data), self.counters.snapshot(), dict(meta or {}), data,
        ))

    def prepare(self, sender: Party, call_kind: str, payload) -> bytes:
        """Steps 1-2: hand the payload to the sender's processor."""
        return process_outbound(call_kind, payload, sender.plugin, sender.role)

    def deliver(self, sender: Party, receivers: Sequence[Party], data: bytes,
                meta: dict | None = None, kind: str | None = None,
                inbound: Callable[[bytes, Party], Any] | None = None) -> list:
        """Steps 3-6: route the buffer and let each receiver's processor interpret it."""
        if not receivers:
            return []
        kind = kind or _kind_name(data)
        self._log("outbound", sender.name, ",".join(r.name for r in receivers), kind, data, meta)
        out = []
        for r in receivers:
            self.counters.add(bytes_transferred=len(data))
            self._log("transport", sender.name, r.name, kind, data, meta)
            with self.timer("decrypt"):
                if inbound is None:
                    result = process_inbound(data, r.plugin, r.role)
                else:
                    result = inbound(data, r)
            self._log("inbound", sender.name, r.name, kind, data, meta)
            out.append(result)
        return out

    def send(self, sender: Party, receivers: Sequence[Party], call_kind: str, payload,
             meta: dict | None = None) -> list:
        if not receivers:
            return []
        with self.timer("encrypt"):
            data = self.prepare(sender, call_kind, payload)
        return self.deliver(sender, receivers, data, meta)

    def send_model(self, sender: Party, receivers: Sequence[Party], forest: Forest,
                   meta: dict | None = None) -> list[Forest]:
        data = forest.dumps().encode()
        return self.deliver(sender, receivers, data, meta, MODEL_KIND,
                            lambda d, r: Forest.loads(d.decode()))


# ---------------------------------------------------------------------------
# run configuration and results


@dataclass
class SecurityConfig:
    """Which plugin to use and where key material comes from."""

    plugin: str = "passthrough"
    key_bits: int = 2048
    seed: int | None = None
    keypair: he.Keypair | None = None

    def __post_init__(self):
        if self.plugin not in ("passthrough", "paillier"):
            raise FederationError(f"unknown plugin {self.plugin!r}")

    def resolve_keypair(self) -> he.Keypair:
        if self.keypair is None:
            self.keypair = he.keygen(self.key_bits, self.seed)
        return self.keypair

    def make_plugin(self, counters: OpCounters, holds_private: bool, stream: int) -> EncryptionPlugin:
        if self.plugin == "passthrough":
            return PassthroughPlugin(counters)
        kp = self.resolve_keypair()
        rng = random.Random(f"{self.seed}:{stream}") if self.seed is not None else None
        return PaillierPlugin.for_keypair(kp, holds_private, counters=counters, rng=rng)


@dataclass
class RunResult:
    mode: str
    forest: Forest
    counters: OpCounters
    transcript: Transcript
    timings: dict[str, float]
    round_counters: list[dict[str, int]] = field(default_factory=list)
    party_forests: dict[int, Forest] = field(default_factory=dict)
    partial_models: dict = field(default_factory=dict)
    cuts: list[np.ndarray] | None = None


def _pmap(fn, items, threads: int | None):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# horizontal, histogram-based


class _HorizontalGrower(TreeGrower):
    def __init__(self, params, peers, server, net, state, cuts, feature_names, threads):
        super().__init__(params, [len(c) for c in cuts])
        self.peers, self.server, self.net = peers, server, net
        self.state = state
        self.cuts = cuts
        self.feature_names = feature_names
        self.threads = threads
        self.leaf_of_row = {p.party_id: np.zeros(state[p.party_id]["binned"].shape[0], dtype=np.int64)
                            for p in peers}

    def build_histograms(self, level):
        B = self.params.max_bin
        timer = self.net.timer

        def local(p: Party):
            st = self.state[p.party_id]
            hist = np.stack([build_histogram(st["binned"], st["gh"], n.rows[p.party_id], B) for n in level])
            return self.net.prepare(p, CallKind.ALLREDUCE, hist)

        with timer("encrypt"):
            outbound = _pmap(local, self.peers, self.threads)
        received = []
        for p, data in zip(self.peers, outbound):
            received += self.net.deliver(p, [self.server], data, {"nodes": [n.node_id for n in level]})
        with timer("aggregate"):
            agg = add_encrypted_histograms(received, self.server.plugin)
        results = self.net.send(self.server, self.peers, CallKind.RESULT, agg,
                                {"nodes": [n.node_id for n in level]})
        first = results[0]
        for r in results[1:]:
            if not np.array_equal(first, r):
                raise FederationError("parties decrypted different global histograms")
        return list(first)

    def partition(self, node, split, left_id, right_id):
        left, right = {}, {}
        for p in self.peers:
            rows = node.rows[p.party_id]
            mask = self.state[p.party_id]["binned"][rows, split.feature_index] <= split.cut_index
            left[p.party_id], right[p.party_id] = rows[mask], rows[~mask]
        return left, right

    def describe_split(self, tree_node, split):
        tree_node.feature = self.feature_names[split.feature_index]
        tree_node.threshold = float(self.cuts[split.feature_index][split.cut_index])

    def on_leaf(self, node, tree_node):
        for pid, rows in node.rows.items():
            self.leaf_of_row[pid][rows] = tree_node.node_id


def _check_horizontal(shards: Sequence[PartyShard]):
    if not shards:
        raise FederationError("no parties")
    names = shards[0].data.feature_names
    seen: set[int] = set()
    for s in shards:
        if s.data.label is None:
            raise FederationError(f"party {s.party_id} has no label")
        if s.data.feature_names != names:
            raise FederationError(f"party {s.party_id} holds different features")
        ids = set(s.data.row_ids.tolist())
        if ids & seen:
            raise FederationError(f"party {s.party_id} shares rows with another party")
        seen |= ids


def run_horizontal_histogram(shards: Sequence[PartyShard], params: TrainParams,
                             security: SecurityConfig | None = None,
                             threads: int | None = None) -> RunResult:
    """Secure horizontal training: local histograms summed at a key-less server.

    Every peer holds the full keypair; the server gets a public-only plugin.
    """
    security = security or SecurityConfig()
    shards = sorted(shards, key=lambda s: s.party_id)
    _check_horizontal(shards)
    counters, transcript, timer = OpCounters(), Transcript(), PhaseTimer()
    net = Network(counters, transcript, timer)
    peers = [Party(s.party_id, PEER, s, security.make_plugin(counters, True, s.party_id)) for s in shards]
    server = Party(-1, SERVER, None, security.make_plugin(counters, False, -1))
    feature_names = shards[0].data.feature_names
    n_features = len(feature_names)

    with timer("cuts"):
        local_cuts = [compute_all_cuts(s.data, params.max_bin) for s in shards]
    collected = []
    for p, lc in zip(peers, local_cuts):
        collected += net.send(p, [server], CallKind.CUT_SYNC, lc)
    with timer("cuts"):
        cuts = [merge_cut_candidates([c[f] for c in collected], params.max_bin) for f in range(n_features)]
    synced = net.send(server, peers, CallKind.CUT_SYNC, cuts)

    state = {}
    for p, pc in zip(peers, synced):
        d = p.shard.data
        check_rows(d.n_rows)
        state[p.party_id] = {
            "binned": bin_matrix(d.X, pc),
            "margin": np.full(d.n_rows, params.base_margin),
        }
    forests = {p.party_id: Forest([], params.learning_rate, params.base_score) for p in peers}
    round_counters = []
    for t in range(params.num_trees):
        net.round = t
        before = counters.snapshot()
        with timer("gradient"):
            for p in peers:
                st = state[p.party_id]
                st["gh"] = quantize_gh(compute_gradients(p.shard.data.label, sigmoid(st["margin"])))
        grower = _HorizontalGrower(params, peers, server, net, state, synced[0], feature_names, threads)
        with timer("split"):
            tree = grower.grow({p.party_id: np.arange(p.shard.data.n_rows) for p in peers})
        for p in peers:
            f = forests[p.party_id]
            f.trees.append(copy.deepcopy(tree))
            st = state[p.party_id]
            st["margin"] = st["margin"] + f.contribution(tree, tree.leaf_values(grower.leaf_of_row[p.party_id]))
        round_counters.append(counters.diff(before))

    first = forests[peers[0].party_id]
    return RunResult("horizontal", first, counters, transcript, dict(timer.totals),
                     round_counters, forests, cuts=cuts)


# ---------------------------------------------------------------------------
# vertical, histogram-based


class _VerticalGrower(TreeGrower):
    def __init__(self, params, run, n_cuts):
        super().__init__(params, n_cuts)
        self.run = run
        self.leaf_of_row = np.zeros(run.n_rows, dtype=np.int64)

    def build_histograms(self, level):
        run = self.run
        B = self.params.max_bin
        timer = run.net.timer
        hist = np.zeros((len(level), run.n_features, B, 2))
        with timer("aggregate"):
            a = run.local[run.active.party_id]
            for i, n in enumerate(level):
                hist[i, a["global_idx"]] = build_histogram(a["binned"], run.gh, n.rows, B)
        for p in run.passives:
            st = run.local[p.party_id]
            with timer("aggregate"):
                payload = accumulate_encrypted(
                    st["gh_payload"], st["binned"], [st["rows"][n.node_id] for n in level],
                    p.plugin, B, st["bins_per_feature"],
                )
            (part,) = run.net.send(p, [run.active], CallKind.ALLGATHER, payload,
                                   {"nodes": [n.node_id for n in level]})
            hist[:, st["global_idx"]] = part
        return list(hist)

    def partition(self, node, split, left_id, right_id):
        run = self.run
        owner = run.owner_of[split.feature_index]
        record = SplitRecord(node.node_id, left_id, owner, split.feature_index, split.cut_index)
        if owner != run.active.party_id:
            owner_party = run.parties[owner]
            run.net.send(run.active, [owner_party], CallKind.TREE_SYNC, [record])
        st = run.local[owner]
        rows = node.rows if owner == run.active.party_id else st["rows"][node.node_id]
        local_f = st["global_idx"].index(split.feature_index)
        mask = st["binned"][rows, local_f] <= split.cut_index
        if owner != run.active.party_id:
            st["thresholds"][(run.tree_index, node.node_id)] = (
                st["names"][local_f], float(st["cuts"][local_f][split.cut_index]))
        others = [p for p in run.all_parties if p.party_id != owner]
        with_mask = SplitRecord(node.node_id, left_id, owner, split.feature_index, split.cut_index, mask)
        run.net.send(run.parties[owner], others, CallKind.TREE_SYNC, [with_mask])
        for p in run.passives:
            pr = run.local[p.party_id]["rows"]
            prow = pr.pop(node.node_id)
            pr[left_id], pr[right_id] = prow[mask], prow[~mask]
        return node.rows[mask], node.rows[~mask]

    def describe_split(self, tree_node, split):
        run = self.run
        owner = run.owner_of[split.feature_index]
        tree_node.owner = owner
        if owner == run.active.party_id:
            a = run.local[owner]
            local_f = a["global_idx"].index(split.feature_index)
            tree_node.feature = a["names"][local_f]
            tree_node.threshold = float(a["cuts"][local_f][split.cut_index])

    def on_leaf(self, node, tree_node):
        self.leaf_of_row[node.rows] = tree_node.node_id
        for p in self.run.passives:
            self.run.local[p.party_id]["rows"].pop(node.node_id, None)


def run_vertical_histogram(shards: Sequence[PartyShard], params: TrainParams,
                           security: SecurityConfig | None = None) -> RunResult:
    """Secure vertical training.

    The active party encrypts its gradient pairs once per tree and
    broadcasts them; passive parties sum ciphertexts into per-bin
    histograms over their own features and return them for decryption.
    Split thresholds for a passive feature never leave its owner: the
    active party learns only the cut index, and the owner answers with the
    row partition.
    """
    from .inference import assemble_forest, save_partial

    security = security or SecurityConfig()
    shards = sorted(shards, key=lambda s: s.party_id)
    actives = [s for s in shards if s.role == ACTIVE]
    if len(actives) != 1:
        raise FederationError(f"vertical mode needs exactly one active party, got {len(actives)}")
    if actives[0].data.label is None:
        raise FederationError("the active party holds no label")
    for s in shards:
        if s.role != ACTIVE and s.data.label is not None:
            raise FederationError(f"passive party {s.party_id} must not hold the label")
        if not np.array_equal(s.data.row_ids, actives[0].data.row_ids):
            raise FederationError(f"party {s.party_id} rows are not aligned with the active party")
    all_idx = sorted(i for s in shards for i in s.feature_indices)
    if all_idx != list(range(len(all_idx))):
        raise FederationError("feature indices must partition 0..n_features-1")

    counters, transcript, timer = OpCounters(), Transcript(), PhaseTimer()
    run = SimpleNamespace()
    run.net = Network(counters, transcript, timer)
    run.n_rows = actives[0].data.n_rows
    run.n_features = len(all_idx)
    check_rows(run.n_rows)
    run.parties = {}
    run.local = {}
    run.owner_of = {}
    for s in shards:
        is_active = s.role == ACTIVE
        p = Party(s.party_id, ACTIVE if is_active else PASSIVE, s,
                  security.make_plugin(counters, is_active, s.party_id))
        run.parties[s.party_id] = p
        with timer("cuts"):
            cuts = compute_all_cuts(s.data, params.max_bin)
        run.local[s.party_id] = {
            "names": list(s.data.feature_names),
            "global_idx": list(s.feature_indices),
            "cuts": cuts,
            "binned": bin_matrix(s.data.X, cuts),
            "bins_per_feature": [len(c) + 1 for c in cuts],
            "thresholds": {},
        }
        for gi in s.feature_indices:
            run.owner_of[gi] = s.party_id
    run.all_parties = [run.parties[s.party_id] for s in shards]
    run.active = run.parties[actives[0].party_id]
    run.passives = [p for p in run.all_parties if p.role == PASSIVE]
    label = run.active.shard.data.label

    # cut counts of foreign features stay private; a split past a feature's
    # last cut leaves one child empty and scores zero gain, so it never wins
    n_cuts = np.full(run.n_features, params.max_bin - 1)
    a = run.local[run.active.party_id]
    n_cuts[a["global_idx"]] = [len(c) for c in a["cuts"]]

    forest = Forest([], params.learning_rate, params.base_score)
    margin = np.full(run.n_rows, params.base_margin)
    round_counters = []
    for t in range(params.num_trees):
        run.net.round = t
        run.tree_index = t
        before = counters.snapshot()
        with timer("gradient"):
            run.gh = quantize_gh(compute_gradients(label, sigmoid(margin)))
        received = run.net.send(run.active, run.passives, CallKind.BROADCAST, run.gh)
        for p, payload in zip(run.passives, received):
            st = run.local[p.party_id]
            st["gh_payload"] = payload
            st["rows"] = {0: np.arange(run.n_rows)}
        grower = _VerticalGrower(params, run, n_cuts)
        with timer("split"):
            tree = grower.grow(np.arange(run.n_rows))
        margin = margin + forest.contribution(tree, tree.leaf_values(grower.leaf_of_row))
        forest.trees.append(tree)
        round_counters.append(counters.diff(before))

    feature_owner = {}
    for pid, st in run.local.items():
        for name in st["names"]:
            feature_owner[name] = pid
    passive_records = {pid: run.local[pid]["thresholds"] for pid in run.local}
    global_forest = assemble_forest(forest, passive_records)
    partials = {
        pid: save_partial(global_forest, run.local[pid]["names"], pid,
                          is_active=(pid == run.active.party_id), feature_owner=feature_owner)
        for pid in run.local
    }
    return RunResult("vertical", global_forest, counters, transcript, dict(timer.totals),
                     round_counters, {}, partials)


# ---------------------------------------------------------------------------
# tree-based modes


def _peer_parties(shards, counters):
    _check_horizontal(shards)
    return [Party(s.party_id, PEER, s, PassthroughPlugin(counters)) for s in shards]


def run_cyclic(shards: Sequence[PartyShard], params: TrainParams) -> RunResult:
    """Hand the forest from party to party in ascending id; each boosts on local data only.

    ``params.num_trees`` is the total tree count; the last visit may add
    fewer than ``trees_per_round`` trees.
    """
    shards = sorted(shards, key=lambda s: s.party_id)
    counters, transcript, timer = OpCounters(), Transcript(), PhaseTimer()
    net = Network(counters, transcript, timer)
    parties = _peer_parties(shards, counters)
    with timer("cuts"):
        local_cuts = {p.party_id: compute_all_cuts(p.shard.data, params.max_bin) for p in parties}
    forest = Forest([], params.learning_rate, params.base_score)
    round_counters = []
    r = 0
    while len(forest.trees) < params.num_trees:
        net.round = r
        before = counters.snapshot()
        p = parties[r % len(parties)]
        n_new = min(params.trees_per_round, params.num_trees - len(forest.trees))
        with timer("split"):
            trees, _ = boost_local(p.shard.data, params, forest, n_new, cuts=local_cuts[p.party_id])
        first_new = len(forest.trees)
        forest.trees.extend(trees)
        nxt = parties[(r + 1) % len(parties)]
        if len(parties) > 1:
            (forest,) = net.send_model(p, [nxt], forest, {
                "trained_by": p.party_id,
                "trees": list(range(first_new, len(forest.trees))),
            })
        round_counters.append(counters.diff(before))
        r += 1
    return RunResult("cyclic", forest, counters, transcript, dict(timer.totals),
                     round_counters, {p.party_id: forest for p in parties})


def run_bagging(shards: Sequence[PartyShard], params: TrainParams,
                num_rounds: int | None = None, threads: int | None = None) -> RunResult:
    """Every round, each party boosts ``trees_per_round`` trees from the shared global model.

    The server appends all submitted trees as one layer with scale ``1/N``,
    so a layer moves the margin by the average of the parties' updates.
    ``num_rounds`` defaults to ``params.num_trees``.
    """
    shards = sorted(shards, key=lambda s: s.party_id)
    counters, transcript, timer = OpCounters(), Transcript(), PhaseTimer()
    net = Network(counters, transcript, timer)
    parties = _peer_parties(shards, counters)
    server = Party(-1, SERVER, None, PassthroughPlugin(counters))
    n = len(parties)
    scale = 1.0 / n
    with timer("cuts"):
        local_cuts = {p.party_id: compute_all_cuts(p.shard.data, params.max_bin) for p in parties}
    forest = Forest([], params.learning_rate, params.base_score)
    rounds = params.num_trees if num_rounds is None else num_rounds
    round_counters = []
    for r in range(rounds):
        net.round = r
        before = counters.snapshot()

        def local(p: Party) -> list[Tree]:
            trees, _ = boost_local(p.shard.data, params, forest, params.trees_per_round,
                                   cuts=local_cuts[p.party_id], scale=scale)
            return trees

        with timer("split"):
            submitted = _pmap(local, parties, threads)
        layer: list[Tree] = []
        for p, trees in zip(parties, submitted):
            if n > 1:
                (got,) = net.send_model(p, [server], Forest(trees, params.learning_rate, params.base_score),
                                        {"round": r, "party": p.party_id})
                trees = got.trees
            layer.extend(trees)
        forest = Forest(forest.trees + layer, params.learning_rate, params.base_score)
        if n > 1:
            copies = net.send_model(server, parties, forest, {"round": r})
            forest = copies[0]
        round_counters.append(counters.diff(before))
    return RunResult("bagging", forest, counters, transcript, dict(timer.totals),
                     round_counters, {p.party_id: forest for p in parties})


def run_centralized(data, params: TrainParams) -> RunResult:
    from .gbdt import train_centralized

    timer = PhaseTimer()
    with timer("split"):
        forest = train_centralized(data, params)
    return RunResult("centralized", forest, OpCounters(), Transcript(), dict(timer.totals))


# ---------------------------------------------------------------------------
# threat-model probes


def label_probe(transcript: Transcript, party_name: str, n_rows: int) -> np.ndarray | None:
    """Best-effort label guess from the gradient buffers a party received.

    Plaintext gradients give the label away (``g < 0`` iff ``y = 1``). For
    ciphertexts the probe can only threshold the ciphertext integers at
    their median, which carries no information about the plaintext.
    Returns ``None`` when the party saw no gradient buffer.
    """
    from .processor import ProcessorBuffer

    for e in transcript.received_by(party_name):
        if e.kind == Kind.GH_PAIRS_PLAIN.name:
            gh = ProcessorBuffer.from_bytes(e.data).body
            return (gh[:n_rows, 0] < 0).astype(np.float64)
        if e.kind == Kind.GH_PAIRS_ENC.name:
            cts = ProcessorBuffer.from_bytes(e.data).body.ciphertexts[0::2][:n_rows]
            vals = np.array([c % (1 << 62) for c in cts], dtype=np.float64)
            return (vals > np.median(vals)).astype(np.float64)
    return None
