"""Processor boundary between the tree engine and the transport.

Every message a party sends is turned into a :class:`ProcessorBuffer` by
:func:`process_outbound` (serialize, and encrypt through the configured
plugin) and turned back into engine data by :func:`process_inbound`
(parse, and decrypt when the receiving role is allowed to).

Buffer layout, all integers little-endian::

    magic     4s   b"SFXB"
    version   u8
    kind      u8   see :class:`Kind`
    n_samples u32
    n_features u32
    n_bins    u32
    n_nodes   u32
    payload   kind-specific

Ciphertexts in a payload are a u32 byte length followed by the integer in
big-endian order.
"""

from __future__ import annotations

import secrets
import struct
import threading
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import he
from .gbdt import build_histogram

MAGIC = b"SFXB"
VERSION = 1
HEADER = struct.Struct("<4sBBIIII")

ACTIVE, PASSIVE, PEER, SERVER = "active", "passive", "peer", "server"
DECRYPTING_ROLES = frozenset({ACTIVE, PEER})


class Kind(IntEnum):
    GH_PAIRS_PLAIN = 1
    GH_PAIRS_ENC = 2
    HISTOGRAM_PLAIN = 3
    HISTOGRAM_ENC = 4
    AGG_RESULT_PLAIN = 5
    AGG_RESULT_ENC = 6
    CUT_SYNC = 7
    TREE_SYNC = 8


class CallKind:
    BROADCAST = "broadcast"    # active party's gradient pairs
    ALLGATHER = "allgather"    # per-party histograms sent to one collector
    ALLREDUCE = "allreduce"    # local histograms summed at the server
    RESULT = "result"          # server's aggregate sent back
    CUT_SYNC = "cut_sync"
    TREE_SYNC = "tree_sync"


class ProcessorError(ValueError):
    pass


class BufferFormatError(ProcessorError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class AuthorizationError(ProcessorError):
    """A role tried to decrypt something the threat model forbids it to see."""


@dataclass
class OpCounters:
    encryptions: int = 0
    zero_encryptions: int = 0
    ciphertext_additions: int = 0
    decryptions: int = 0
    vector_encryptions: int = 0
    vector_additions: int = 0
    vector_decryptions: int = 0
    packed_ciphertexts: int = 0
    bytes_transferred: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, **deltas: int):
        with self._lock:
            for k, v in deltas.items():
                setattr(self, k, getattr(self, k) + v)

    def snapshot(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}

    def diff(self, before: dict[str, int]) -> dict[str, int]:
        now = self.snapshot()
        return {k: now[k] - before.get(k, 0) for k in now}


# ---------------------------------------------------------------------------
# payload types


@dataclass
class EncryptedGH:
    """Interleaved ``Enc(g_0), Enc(h_0), Enc(g_1), ...``."""

    ciphertexts: list[int]

    @property
    def n_samples(self) -> int:
        return len(self.ciphertexts) // 2


@dataclass
class EncryptedHistogram:
    """Scalar ciphertext per slot, flattened in ``[node][feature][bin][g, h]`` order."""

    ciphertexts: list[int]
    n_nodes: int
    n_features: int
    n_bins: int


@dataclass
class PackedHistogram:
    """Per node, the G and H planes each packed as one vector of ``n_features * n_bins`` slots."""

    G: list[he.PackedVector]
    H: list[he.PackedVector]
    n_features: int
    n_bins: int

    @property
    def n_nodes(self) -> int:
        return len(self.G)


@dataclass
class SplitRecord:
    node_id: int
    left_id: int
    owner: int
    feature_index: int
    cut_index: int
    left_mask: np.ndarray | None = None


# ---------------------------------------------------------------------------
# plugins


class EncryptionPlugin:
    """What a party plugs into the processor. Holds only key material and counters."""

    name = "abstract"
    encrypts = False

    def __init__(self, counters: OpCounters | None = None):
        self.counters = counters if counters is not None else OpCounters()

    @property
    def can_decrypt(self) -> bool:
        return True

    def encrypt_gh(self, gh: np.ndarray):
        raise NotImplementedError

    def accumulate_rows(self, gh_payload, binned: np.ndarray, node_row_sets, n_bins: int,
                        bins_per_feature: Sequence[int]):
        raise NotImplementedError

    def encrypt_histogram(self, hist: np.ndarray):
        raise NotImplementedError

    def add_histograms(self, payloads: list):
        raise NotImplementedError

    def decrypt_histogram(self, payload) -> np.ndarray:
        raise NotImplementedError


class PassthroughPlugin(EncryptionPlugin):
    """Plaintext plugin; the reference every encrypting plugin must agree with."""

    name = "passthrough"

    def encrypt_gh(self, gh):
        return np.asarray(gh, dtype=np.float64)

    def accumulate_rows(self, gh_payload, binned, node_row_sets, n_bins, bins_per_feature=None):
        return np.stack([build_histogram(binned, gh_payload, rows, n_bins) for rows in node_row_sets]) \
            if node_row_sets else np.zeros((0, binned.shape[1], n_bins, 2))

    def encrypt_histogram(self, hist):
        return np.asarray(hist, dtype=np.float64)

    def add_histograms(self, payloads):
        total = payloads[0].copy()
        for p in payloads[1:]:
            if p.shape != total.shape:
                raise ProcessorError(f"histogram shapes differ: {p.shape} vs {total.shape}")
            total = total + p
        return total

    def decrypt_histogram(self, payload):
        return np.asarray(payload, dtype=np.float64)


class PaillierPlugin(EncryptionPlugin):
    """Paillier plugin: scalar ciphertexts for gradients, packed vectors for histograms.

    A plugin built with only a public key can encrypt and add but never
    decrypt.
    """

    name = "paillier"
    encrypts = True

    def __init__(self, public_key: he.PublicKey, private_key: he.PrivateKey | None = None,
                 counters: OpCounters | None = None, rng=None,
                 scale_bits: int = he.DEFAULT_SCALE_BITS, slot_bits: int = he.DEFAULT_SLOT_BITS,
                 guard_bits: int = he.DEFAULT_GUARD_BITS):
        super().__init__(counters)
        if private_key is not None and private_key.public.n != public_key.n:
            raise he.KeyMismatchError("private key does not match public key")
        self.public_key = public_key
        self._private_key = private_key
        self.rng = rng if rng is not None else secrets.SystemRandom()
        self.scale_bits = scale_bits
        self.slot_bits = slot_bits
        self.guard_bits = guard_bits

    @classmethod
    def for_keypair(cls, keypair: he.Keypair, holds_private: bool, **kw) -> PaillierPlugin:
        return cls(keypair.public, keypair.private if holds_private else None, **kw)

    def public_only(self, counters: OpCounters | None = None) -> PaillierPlugin:
        return PaillierPlugin(self.public_key, None, counters or self.counters, self.rng,
                              self.scale_bits, self.slot_bits, self.guard_bits)

    @property
    def can_decrypt(self) -> bool:
        return self._private_key is not None

    def _require_private(self) -> he.PrivateKey:
        if self._private_key is None:
            raise AuthorizationError("this party holds no private key")
        return self._private_key

    def _encode(self, x: float) -> int:
        return he.encode_fixed(float(x), self.scale_bits, self.public_key.n).raw

    def _decode(self, m: int) -> float:
        return he.decode_fixed(m, self.scale_bits, self.public_key.n)

    def encrypt_gh(self, gh):
        pk = self.public_key
        flat = np.asarray(gh, dtype=np.float64).ravel()
        sk = self._private_key
        cts = [he.raw_encrypt(pk, self._encode(x), self.rng, sk=sk) for x in flat]
        self.counters.add(encryptions=len(cts))
        return EncryptedGH(cts)

    def _zero(self) -> int:
        self.counters.add(zero_encryptions=1)
        return he.raw_encrypt(self.public_key, 0, self.rng, sk=self._private_key)

    def accumulate_rows(self, gh_payload: EncryptedGH, binned, node_row_sets, n_bins,
                        bins_per_feature=None):
        n_rows, n_features = binned.shape
        if gh_payload.n_samples != n_rows:
            raise ProcessorError(
                f"{gh_payload.n_samples} encrypted gradient pairs for {n_rows} rows"
            )
        if bins_per_feature is None:
            bins_per_feature = [n_bins] * n_features
        nsq = self.public_key.n_squared
        cts = gh_payload.ciphertexts
        out: list[int] = []
        additions = 0
        for rows in node_row_sets:
            rows = np.asarray(rows, dtype=np.int64)
            for f in range(n_features):
                acc: list[int | None] = [None] * (2 * n_bins)
                for i, b in zip(rows.tolist(), binned[rows, f].tolist()):
                    for k in (0, 1):
                        slot = 2 * b + k
                        c = cts[2 * i + k]
                        if acc[slot] is None:
                            acc[slot] = c
                        else:
                            acc[slot] = acc[slot] * c % nsq
                            additions += 1
                for slot in range(2 * n_bins):
                    if acc[slot] is None:
                        # bins past the feature's cut count are empty for every node
                        acc[slot] = self._zero() if slot // 2 < bins_per_feature[f] else 1
                out.extend(acc)
        self.counters.add(ciphertext_additions=additions)
        return EncryptedHistogram(out, len(node_row_sets), n_features, n_bins)

    def encrypt_histogram(self, hist):
        hist = np.asarray(hist, dtype=np.float64)
        n_nodes, n_features, n_bins, _ = hist.shape
        G, H = [], []
        for node in range(n_nodes):
            for plane, dest in ((0, G), (1, H)):
                vec = he.pack_vector(hist[node, :, :, plane].ravel().tolist(), self.public_key,
                                     self.rng, self.slot_bits, self.guard_bits, self.scale_bits)
                self.counters.add(vector_encryptions=1, packed_ciphertexts=len(vec.ciphertexts))
                dest.append(vec)
        return PackedHistogram(G, H, n_features, n_bins)

    def add_histograms(self, payloads):
        first = payloads[0]
        if isinstance(first, EncryptedHistogram):
            nsq = self.public_key.n_squared
            total = list(first.ciphertexts)
            for p in payloads[1:]:
                if (p.n_nodes, p.n_features, p.n_bins) != (first.n_nodes, first.n_features, first.n_bins):
                    raise ProcessorError("encrypted histogram shapes differ")
                total = [a * b % nsq for a, b in zip(total, p.ciphertexts)]
                self.counters.add(ciphertext_additions=len(total))
            return EncryptedHistogram(total, first.n_nodes, first.n_features, first.n_bins)
        for p in payloads[1:]:
            if (p.n_nodes, p.n_features, p.n_bins) != (first.n_nodes, first.n_features, first.n_bins):
                raise ProcessorError("packed histogram shapes differ")
        G, H = list(first.G), list(first.H)
        for p in payloads[1:]:
            for node in range(first.n_nodes):
                G[node] = he.add_packed(self.public_key, G[node], p.G[node])
                H[node] = he.add_packed(self.public_key, H[node], p.H[node])
                self.counters.add(vector_additions=2)
        return PackedHistogram(G, H, first.n_features, first.n_bins)

    def decrypt_histogram(self, payload):
        sk = self._require_private()
        if isinstance(payload, EncryptedHistogram):
            n = payload.n_nodes * payload.n_features * payload.n_bins * 2
            vals = np.zeros(n, dtype=np.float64)
            count = 0
            for idx, c in enumerate(payload.ciphertexts):
                if c == 1:
                    continue  # structural padding, known-zero
                vals[idx] = self._decode(he.raw_decrypt(sk, c))
                count += 1
            self.counters.add(decryptions=count)
            return vals.reshape(payload.n_nodes, payload.n_features, payload.n_bins, 2)
        out = np.zeros((payload.n_nodes, payload.n_features, payload.n_bins, 2))
        for node in range(payload.n_nodes):
            for plane, vec in ((0, payload.G[node]), (1, payload.H[node])):
                vals = he.unpack_vector(vec, sk)
                out[node, :, :, plane] = np.asarray(vals).reshape(payload.n_features, payload.n_bins)
                self.counters.add(vector_decryptions=1, decryptions=len(vec.ciphertexts))
        return out


# ---------------------------------------------------------------------------
# byte-level codec


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise BufferFormatError(
                f"truncated buffer: need {n} bytes, {len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def big_int(self) -> int:
        return int.from_bytes(self.take(self.u32()), "big")

    def done(self):
        if self.offset != len(self.data):
            raise BufferFormatError(f"{len(self.data) - self.offset} trailing bytes", self.offset)


def _put_ints(buf: bytearray, values: Sequence[int]):
    for v in values:
        raw = v.to_bytes(max(1, (v.bit_length() + 7) // 8), "big")
        buf += struct.pack("<I", len(raw))
        buf += raw


def _put_packed(buf: bytearray, vecs: list[he.PackedVector]):
    for vec in vecs:
        buf += struct.pack("<I", vec.n_summands)
        _put_ints(buf, vec.ciphertexts)


@dataclass
class ProcessorBuffer:
    kind: Kind
    n_samples: int = 0
    n_features: int = 0
    n_bins: int = 0
    n_nodes: int = 0
    body: object = None
    version: int = VERSION

    def to_bytes(self) -> bytes:
        buf = bytearray(HEADER.pack(MAGIC, self.version, int(self.kind), self.n_samples,
                                    self.n_features, self.n_bins, self.n_nodes))
        k, body = self.kind, self.body
        if k in (Kind.GH_PAIRS_PLAIN, Kind.HISTOGRAM_PLAIN, Kind.AGG_RESULT_PLAIN):
            buf += np.ascontiguousarray(body, dtype="<f8").tobytes()
        elif k == Kind.GH_PAIRS_ENC:
            _put_ints(buf, body.ciphertexts)
        elif k in (Kind.HISTOGRAM_ENC, Kind.AGG_RESULT_ENC):
            if isinstance(body, EncryptedHistogram):
                buf.append(0)
                _put_ints(buf, body.ciphertexts)
            else:
                buf.append(1)
                if body.G:
                    ref = body.G[0]
                    buf += struct.pack("<IIIII", ref.slots_per_ciphertext, ref.slot_bits,
                                       ref.guard_bits, ref.scale_bits, len(ref.ciphertexts))
                else:
                    buf += bytes(20)
                for node in range(body.n_nodes):
                    _put_packed(buf, [body.G[node], body.H[node]])
        elif k == Kind.CUT_SYNC:
            for cuts in body:
                cuts = np.asarray(cuts, dtype="<f8")
                buf += struct.pack("<I", cuts.size) + cuts.tobytes()
        elif k == Kind.TREE_SYNC:
            for rec in body:
                buf += struct.pack("<IIIII", rec.node_id, rec.left_id, rec.owner,
                                   rec.feature_index, rec.cut_index)
                if rec.left_mask is None:
                    buf.append(0)
                else:
                    buf.append(1)
                    buf += np.packbits(np.asarray(rec.left_mask, dtype=bool), bitorder="little").tobytes()
        else:  # pragma: no cover - Kind is closed
            raise ProcessorError(f"unknown kind {k}")
        return bytes(buf)

    @classmethod
    def from_bytes(cls, data: bytes, key_id: str = "") -> ProcessorBuffer:
        r = _Reader(data)
        magic, version, kind, ns, nf, nb, nn = HEADER.unpack(r.take(HEADER.size))
        if magic != MAGIC:
            raise BufferFormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise BufferFormatError(f"unsupported version {version}", 4)
        try:
            k = Kind(kind)
        except ValueError:
            raise BufferFormatError(f"unknown buffer kind {kind}", 5) from None
        if k == Kind.GH_PAIRS_PLAIN:
            body = r.f64s(2 * ns).reshape(ns, 2)
        elif k in (Kind.HISTOGRAM_PLAIN, Kind.AGG_RESULT_PLAIN):
            body = r.f64s(nn * nf * nb * 2).reshape(nn, nf, nb, 2)
        elif k == Kind.GH_PAIRS_ENC:
            body = EncryptedGH([r.big_int() for _ in range(2 * ns)])
        elif k in (Kind.HISTOGRAM_ENC, Kind.AGG_RESULT_ENC):
            layout_at = r.offset
            layout = r.u8()
            if layout == 0:
                body = EncryptedHistogram([r.big_int() for _ in range(nn * nf * nb * 2)], nn, nf, nb)
            elif layout == 1:
                per, slot_bits, guard_bits, scale_bits, n_ct = struct.unpack("<IIIII", r.take(20))
                G, H = [], []
                for _ in range(nn):
                    for dest in (G, H):
                        summands = r.u32()
                        cts = [r.big_int() for _ in range(n_ct)]
                        dest.append(he.PackedVector(cts, per, slot_bits, guard_bits, scale_bits,
                                                    nf * nb, summands, key_id))
                body = PackedHistogram(G, H, nf, nb)
            else:
                raise BufferFormatError(f"unknown histogram layout {layout}", layout_at)
        elif k == Kind.CUT_SYNC:
            body = [r.f64s(r.u32()) for _ in range(nf)]
        else:
            body = []
            for _ in range(nn):
                node_id, left_id, owner, fi, ci = struct.unpack("<IIIII", r.take(20))
                mask = None
                if r.u8():
                    bits = np.frombuffer(r.take((ns + 7) // 8), dtype=np.uint8)
                    mask = np.unpackbits(bits, bitorder="little")[:ns].astype(bool)
                body.append(SplitRecord(node_id, left_id, owner, fi, ci, mask))
        r.done()
        return cls(k, ns, nf, nb, nn, body, version)


# ---------------------------------------------------------------------------
# processing steps


def _histogram_dims(body) -> tuple[int, int, int]:
    if isinstance(body, np.ndarray):
        if body.ndim != 4 or body.shape[-1] != 2:
            raise ProcessorError(f"histogram payload must be (nodes, features, bins, 2), got {body.shape}")
        return body.shape[0], body.shape[1], body.shape[2]
    if isinstance(body, (EncryptedHistogram, PackedHistogram)):
        return body.n_nodes, body.n_features, body.n_bins
    raise ProcessorError(f"not a histogram payload: {type(body).__name__}")


def process_outbound(call_kind: str, payload, plugin: EncryptionPlugin, role: str) -> bytes:
    """Serialize (and, for a non-passthrough plugin, encrypt) an outgoing payload.

    * ``broadcast``: the active party's ``(n, 2)`` gradient pairs.
    * ``allreduce``: a peer's local plaintext histogram; encrypted here.
    * ``allgather``: a histogram already in its final (plain or encrypted) form.
    * ``result``: the server's aggregate.
    * ``cut_sync`` / ``tree_sync``: cut lists and split records, never encrypted.
    """
    try:
        if call_kind == CallKind.BROADCAST:
            if role != ACTIVE:
                raise AuthorizationError(f"role {role!r} may not broadcast gradients")
            gh = np.asarray(payload, dtype=np.float64)
            if gh.ndim != 2 or gh.shape[1] != 2:
                raise ProcessorError(f"gradient payload must be (n, 2), got {gh.shape}")
            body = plugin.encrypt_gh(gh)
            kind = Kind.GH_PAIRS_ENC if plugin.encrypts else Kind.GH_PAIRS_PLAIN
            buf = ProcessorBuffer(kind, n_samples=gh.shape[0], body=body)
        elif call_kind == CallKind.ALLREDUCE:
            if not isinstance(payload, np.ndarray):
                raise ProcessorError("allreduce expects a plaintext local histogram")
            nn, nf, nb = _histogram_dims(payload)
            body = plugin.encrypt_histogram(payload)
            kind = Kind.HISTOGRAM_ENC if plugin.encrypts else Kind.HISTOGRAM_PLAIN
            buf = ProcessorBuffer(kind, n_features=nf, n_bins=nb, n_nodes=nn, body=body)
        elif call_kind in (CallKind.ALLGATHER, CallKind.RESULT):
            nn, nf, nb = _histogram_dims(payload)
            plain = isinstance(payload, np.ndarray)
            if call_kind == CallKind.ALLGATHER:
                kind = Kind.HISTOGRAM_PLAIN if plain else Kind.HISTOGRAM_ENC
            else:
                kind = Kind.AGG_RESULT_PLAIN if plain else Kind.AGG_RESULT_ENC
            buf = ProcessorBuffer(kind, n_features=nf, n_bins=nb, n_nodes=nn, body=payload)
        elif call_kind == CallKind.CUT_SYNC:
            buf = ProcessorBuffer(Kind.CUT_SYNC, n_features=len(payload), body=list(payload))
        elif call_kind == CallKind.TREE_SYNC:
            records = list(payload)
            ns = 0
            for rec in records:
                if rec.left_mask is not None:
                    ns = len(rec.left_mask)
            buf = ProcessorBuffer(Kind.TREE_SYNC, n_samples=ns, n_nodes=len(records), body=records)
        else:
            raise ProcessorError(f"unknown call kind {call_kind!r}")
    except (ProcessorError, he.HEError):
        raise
    except Exception as exc:
        raise ProcessorError(f"plugin {plugin.name} failed: {exc}") from exc
    return buf.to_bytes()


_ENC_HISTOGRAMS = (Kind.HISTOGRAM_ENC, Kind.AGG_RESULT_ENC)


def process_inbound(data: bytes, plugin: EncryptionPlugin, role: str,
                    decrypt: bool | None = None):
    """Parse a received buffer and, where allowed, decrypt it.

    With ``decrypt=None`` encrypted histograms are decrypted exactly when
    *role* may hold the private key and *plugin* has it; other parties get
    the ciphertext payload back. Passing ``decrypt=True`` from a role that
    must stay blind raises :class:`AuthorizationError`.
    """
    key_id = getattr(getattr(plugin, "public_key", None), "key_id", "")
    buf = ProcessorBuffer.from_bytes(data, key_id)
    if buf.kind == Kind.GH_PAIRS_ENC and decrypt:
        raise AuthorizationError("encrypted gradients may never be decrypted by a receiver")
    if buf.kind in _ENC_HISTOGRAMS:
        allowed = role in DECRYPTING_ROLES and plugin.can_decrypt
        if decrypt and not allowed:
            raise AuthorizationError(f"role {role!r} is not authorized to decrypt {buf.kind.name}")
        if decrypt or (decrypt is None and allowed):
            return plugin.decrypt_histogram(buf.body)
    return buf.body


def accumulate_encrypted(enc_gh_payload, bin_index_matrix: np.ndarray, node_row_sets,
                         plugin: EncryptionPlugin, n_bins: int,
                         bins_per_feature: Sequence[int] | None = None):
    """Per-node, per-feature, per-bin sums of the received gradient pairs.

    Runs at a passive party with public material only; the result is in
    whatever form *plugin* works in (ciphertexts for Paillier).
    """
    n_rows = bin_index_matrix.shape[0]
    got = enc_gh_payload.n_samples if isinstance(enc_gh_payload, EncryptedGH) else len(enc_gh_payload)
    if got != n_rows:
        raise ProcessorError(f"{got} gradient pairs for {n_rows} rows")
    return plugin.accumulate_rows(enc_gh_payload, bin_index_matrix, node_row_sets, n_bins,
                                  bins_per_feature)


def add_encrypted_histograms(payloads: list, plugin: EncryptionPlugin):
    """Slot-wise sum of N parties' histograms; needs no private key."""
    if not payloads:
        raise ProcessorError("nothing to aggregate")
    if len(payloads) == 1:
        return payloads[0]
    return plugin.add_histograms(payloads)
