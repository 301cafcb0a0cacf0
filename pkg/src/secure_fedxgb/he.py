"""Paillier additively homomorphic encryption with fixed-point encodings.

Two encodings sit on top of the raw cryptosystem:

* scalar fixed point: ``round(x * 2**scale_bits) mod n``, residues above
  ``n / 2`` standing for negatives. Used for per-sample gradients.
* packed slots: many fixed-point values laid side by side in one
  plaintext, each offset by a bias so slot sums never borrow or carry
  into a neighbour. Used for whole histograms.

Ciphertexts travel as plain ``int`` inside the bulk helpers; the
:class:`Ciphertext` wrapper adds the key id for the scalar API.
"""

from __future__ import annotations

import hashlib
import math
import random
import secrets
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

try:
    import gmpy2

    def powmod(base: int, exp: int, mod: int) -> int:
        return int(gmpy2.powmod(base, exp, mod))

    def invert(a: int, mod: int) -> int:
        return int(gmpy2.invert(a, mod))

    def _is_probable_prime(x: int) -> bool:
        return bool(gmpy2.is_prime(x, 40))

except ImportError:  # pragma: no cover - gmpy2 is a declared dependency
    gmpy2 = None

    def powmod(base: int, exp: int, mod: int) -> int:
        return pow(base, exp, mod)

    def invert(a: int, mod: int) -> int:
        return pow(a, -1, mod)

    def _is_probable_prime(x: int) -> bool:
        if x < 2:
            return False
        for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
            if x % p == 0:
                return x == p
        d, s = x - 1, 0
        while d % 2 == 0:
            d //= 2
            s += 1
        rng = random.Random(x)
        for _ in range(40):
            a = rng.randrange(2, x - 1)
            y = pow(a, d, x)
            if y in (1, x - 1):
                continue
            for _ in range(s - 1):
                y = y * y % x
                if y == x - 1:
                    break
            else:
                return False
        return True


ALLOWED_KEY_BITS = (512, 1024, 2048, 3072)
DEFAULT_KEY_BITS = 2048
DEFAULT_SCALE_BITS = 40
DEFAULT_SLOT_BITS = 128
DEFAULT_GUARD_BITS = 10
KEY_FORMAT_VERSION = 1
_PUBLIC_TAG = 1
_PRIVATE_TAG = 2


class HEError(ValueError):
    pass


class KeyMismatchError(HEError):
    pass


class EncodingOverflowError(HEError):
    pass


@dataclass(frozen=True)
class PublicKey:
    n: int
    n_squared: int = field(init=False, repr=False)
    g: int = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "n_squared", self.n * self.n)
        object.__setattr__(self, "g", self.n + 1)

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @property
    def key_id(self) -> str:
        return hashlib.sha256(self.n.to_bytes((self.bits + 7) // 8, "big")).hexdigest()[:16]

    @property
    def ciphertext_bytes(self) -> int:
        return (self.n_squared.bit_length() + 7) // 8


@dataclass(frozen=True)
class PrivateKey:
    public: PublicKey
    p: int
    q: int
    lam: int = field(init=False, repr=False)
    mu: int = field(init=False, repr=False)

    def __post_init__(self):
        lam = (self.p - 1) * (self.q - 1) // math.gcd(self.p - 1, self.q - 1)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", invert(lam, self.public.n))
        # CRT decryption constants
        object.__setattr__(self, "_p2", self.p * self.p)
        object.__setattr__(self, "_q2", self.q * self.q)
        object.__setattr__(self, "_hp", self._h(self.p, self.p * self.p))
        object.__setattr__(self, "_hq", self._h(self.q, self.q * self.q))
        object.__setattr__(self, "_p_inv_q", invert(self.p, self.q))
        # CRT encryption constants: r^n mod p^2 only needs n mod p(p-1)
        object.__setattr__(self, "_np", self.public.n % (self.p * (self.p - 1)))
        object.__setattr__(self, "_nq", self.public.n % (self.q * (self.q - 1)))
        object.__setattr__(self, "_p2_inv_q2", invert(self._p2, self._q2))

    def _h(self, x: int, x2: int) -> int:
        return invert((powmod(self.public.g, x - 1, x2) - 1) // x, x)


@dataclass(frozen=True)
class Keypair:
    public: PublicKey
    private: PrivateKey

    @classmethod
    def from_primes(cls, p: int, q: int) -> Keypair:
        """Build a keypair from known primes. Intended for tests and toy examples."""
        if p == q:
            raise HEError("p and q must be distinct")
        n = p * q
        if math.gcd(n, (p - 1) * (q - 1)) != 1:
            raise HEError("gcd(n, (p-1)(q-1)) != 1")
        pub = PublicKey(n)
        return cls(pub, PrivateKey(pub, p, q))


def _random_prime(bits: int, rng: random.Random, max_tries: int) -> int:
    for _ in range(max_tries):
        cand = rng.getrandbits(bits) | (0b11 << (bits - 2)) | 1
        if _is_probable_prime(cand):
            return cand
    raise HEError(f"no {bits}-bit prime found after {max_tries} candidates")


def keygen(modulus_bits: int = DEFAULT_KEY_BITS, rng_seed: int | None = None,
           max_tries: int = 100_000) -> Keypair:
    """Generate a Paillier keypair with an exactly ``modulus_bits``-bit modulus.

    The same *rng_seed* always yields the same keypair; ``None`` draws from
    the OS entropy pool.
    """
    if modulus_bits not in ALLOWED_KEY_BITS:
        raise HEError(f"modulus_bits must be one of {ALLOWED_KEY_BITS}, got {modulus_bits}")
    rng = random.Random(rng_seed) if rng_seed is not None else secrets.SystemRandom()
    half = modulus_bits // 2
    for _ in range(100):
        p = _random_prime(half, rng, max_tries)
        q = _random_prime(half, rng, max_tries)
        if p == q:
            continue
        n = p * q
        # top two bits set on both primes pins the product length
        if n.bit_length() == modulus_bits and math.gcd(n, (p - 1) * (q - 1)) == 1:
            return Keypair.from_primes(p, q)
    raise HEError("key generation failed")


# ---------------------------------------------------------------------------
# raw integer operations


def random_obfuscator_base(pk: PublicKey, rng) -> int:
    while True:
        r = rng.randrange(2, pk.n)
        if math.gcd(r, pk.n) == 1:
            return r


def obfuscator(pk: PublicKey, r: int, sk: PrivateKey | None = None) -> int:
    """``r^n mod n^2``; with the private key the power is taken mod p^2 and q^2 and recombined."""
    if sk is None:
        return powmod(r, pk.n, pk.n_squared)
    a = powmod(r % sk._p2, sk._np, sk._p2)
    b = powmod(r % sk._q2, sk._nq, sk._q2)
    return a + ((b - a) * sk._p2_inv_q2 % sk._q2) * sk._p2


def raw_encrypt(pk: PublicKey, m: int, rng=None, r: int | None = None,
                sk: PrivateKey | None = None) -> int:
    """Encrypt *m*. Passing the matching *sk* gives the same ciphertext, computed faster."""
    if not 0 <= m < pk.n:
        raise HEError("plaintext out of range [0, n)")
    if r is None:
        r = random_obfuscator_base(pk, rng or secrets.SystemRandom())
    # g = n + 1, so g^m = 1 + m*n (mod n^2)
    return (1 + m * pk.n) % pk.n_squared * obfuscator(pk, r, sk) % pk.n_squared


def raw_decrypt(sk: PrivateKey, c: int) -> int:
    pk = sk.public
    if not 0 < c < pk.n_squared or math.gcd(c, pk.n) != 1:
        raise HEError("ciphertext is not a unit modulo n^2")
    p, q = sk.p, sk.q
    mp = (powmod(c, p - 1, sk._p2) - 1) // p * sk._hp % p
    mq = (powmod(c, q - 1, sk._q2) - 1) // q * sk._hq % q
    return mp + ((mq - mp) * sk._p_inv_q % q) * p


def raw_decrypt_reference(sk: PrivateKey, c: int) -> int:
    """Textbook ``L(c^lambda mod n^2) * mu mod n``; slower than :func:`raw_decrypt`."""
    pk = sk.public
    u = powmod(c, sk.lam, pk.n_squared)
    return (u - 1) // pk.n * sk.mu % pk.n


def raw_add(pk: PublicKey, c1: int, c2: int) -> int:
    return c1 * c2 % pk.n_squared


def raw_sum(pk: PublicKey, cs: Iterable[int]) -> int:
    acc = 1
    for c in cs:
        acc = acc * c % pk.n_squared
    return acc


# ---------------------------------------------------------------------------
# scalar API


@dataclass(frozen=True)
class Ciphertext:
    value: int
    key_id: str


def encrypt(public_key: PublicKey, m: int, rng=None, r: int | None = None) -> Ciphertext:
    return Ciphertext(raw_encrypt(public_key, m, rng, r), public_key.key_id)


def decrypt(keypair: Keypair | PrivateKey, c: Ciphertext | int) -> int:
    sk = keypair.private if isinstance(keypair, Keypair) else keypair
    if isinstance(c, Ciphertext):
        if c.key_id != sk.public.key_id:
            raise KeyMismatchError("ciphertext was produced under a different key")
        c = c.value
    return raw_decrypt(sk, c)


def add_ciphertexts(public_key: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    if not c1.key_id == c2.key_id == public_key.key_id:
        raise KeyMismatchError("cannot add ciphertexts under different keys")
    return Ciphertext(raw_add(public_key, c1.value, c2.value), public_key.key_id)


# ---------------------------------------------------------------------------
# fixed point


@dataclass(frozen=True)
class EncodedFixed:
    raw: int
    scale_bits: int


def encode_fixed(x: float, scale_bits: int, modulus: int) -> EncodedFixed:
    v = int(round(x * (1 << scale_bits))) if abs(x) < 2.0 ** 1000 else None
    if v is None or 2 * abs(v) >= modulus:
        raise EncodingOverflowError(f"{x!r} does not fit under n/2 at scale 2^{scale_bits}")
    return EncodedFixed(v % modulus, scale_bits)


def decode_fixed(e: EncodedFixed | int, scale_bits: int, modulus: int) -> float:
    raw = e.raw if isinstance(e, EncodedFixed) else e
    v = raw - modulus if 2 * raw >= modulus else raw
    return v / (1 << scale_bits)


# ---------------------------------------------------------------------------
# packed vectors


def slots_per_ciphertext(modulus_bits: int, slot_bits: int) -> int:
    return (modulus_bits - 1) // slot_bits


def packed_ciphertext_count(length: int, modulus_bits: int, slot_bits: int = DEFAULT_SLOT_BITS) -> int:
    per = slots_per_ciphertext(modulus_bits, slot_bits)
    return -(-length // per)


@dataclass
class PackedVector:
    """Fixed-point values packed ``slots_per_ciphertext`` to a ciphertext.

    Each slot stores ``encoded + bias`` with ``bias = 2**(slot_bits -
    guard_bits - 1)``; after ``n_summands`` additions the bias is removed
    ``n_summands`` times on unpacking.
    """

    ciphertexts: list[int]
    slots_per_ciphertext: int
    slot_bits: int
    guard_bits: int
    scale_bits: int
    logical_length: int
    n_summands: int = 1
    key_id: str = ""

    @property
    def bias(self) -> int:
        return 1 << (self.slot_bits - self.guard_bits - 1)

    def same_layout(self, other: PackedVector) -> bool:
        return (
            len(self.ciphertexts) == len(other.ciphertexts)
            and self.slots_per_ciphertext == other.slots_per_ciphertext
            and self.slot_bits == other.slot_bits
            and self.guard_bits == other.guard_bits
            and self.scale_bits == other.scale_bits
            and self.logical_length == other.logical_length
        )


def pack_plaintexts(values: Sequence[float], modulus_bits: int, slot_bits: int,
                    guard_bits: int, scale_bits: int) -> list[int]:
    per = slots_per_ciphertext(modulus_bits, slot_bits)
    if per < 1:
        raise HEError(f"slot_bits {slot_bits} too wide for a {modulus_bits}-bit modulus")
    bias = 1 << (slot_bits - guard_bits - 1)
    scale = 1 << scale_bits
    out = []
    for start in range(0, len(values), per):
        acc = 0
        for j, x in enumerate(values[start:start + per]):
            v = int(round(float(x) * scale))
            if abs(v) >= bias:
                raise EncodingOverflowError(
                    f"value {x!r} at index {start + j} overflows a {slot_bits}-bit slot"
                )
            acc |= (v + bias) << (j * slot_bits)
        out.append(acc)
    return out


def pack_vector(values: Sequence[float], public_key: PublicKey, rng=None,
                slot_bits: int = DEFAULT_SLOT_BITS, guard_bits: int = DEFAULT_GUARD_BITS,
                scale_bits: int = DEFAULT_SCALE_BITS) -> PackedVector:
    """Encrypt *values* as a packed vector under *public_key*."""
    rng = rng or secrets.SystemRandom()
    plains = pack_plaintexts(values, public_key.bits, slot_bits, guard_bits, scale_bits)
    return PackedVector(
        [raw_encrypt(public_key, m, rng) for m in plains],
        slots_per_ciphertext(public_key.bits, slot_bits),
        slot_bits, guard_bits, scale_bits, len(values), 1, public_key.key_id,
    )


def add_packed(public_key: PublicKey, a: PackedVector, b: PackedVector) -> PackedVector:
    if not (a.key_id == b.key_id == public_key.key_id):
        raise KeyMismatchError("packed vectors were encrypted under different keys")
    if not a.same_layout(b):
        raise HEError("packed vectors have different layouts")
    total = a.n_summands + b.n_summands
    if total > (1 << a.guard_bits):
        raise EncodingOverflowError(
            f"{total} summands exceed the 2^{a.guard_bits} guard capacity"
        )
    nsq = public_key.n_squared
    return PackedVector(
        [x * y % nsq for x, y in zip(a.ciphertexts, b.ciphertexts)],
        a.slots_per_ciphertext, a.slot_bits, a.guard_bits, a.scale_bits,
        a.logical_length, total, a.key_id,
    )


def unpack_plaintexts(plains: Sequence[int], vec: PackedVector) -> list[float]:
    mask = (1 << vec.slot_bits) - 1
    offset = vec.n_summands * vec.bias
    scale = 1 << vec.scale_bits
    out = []
    for m in plains:
        for j in range(vec.slots_per_ciphertext):
            if len(out) == vec.logical_length:
                break
            out.append((((m >> (j * vec.slot_bits)) & mask) - offset) / scale)
    return out


def unpack_vector(vec: PackedVector, private_key: PrivateKey) -> list[float]:
    if vec.key_id != private_key.public.key_id:
        raise KeyMismatchError("packed vector was encrypted under a different key")
    return unpack_plaintexts([raw_decrypt(private_key, c) for c in vec.ciphertexts], vec)


# ---------------------------------------------------------------------------
# key serialization


def _put_int(buf: bytearray, v: int):
    raw = v.to_bytes(max(1, (v.bit_length() + 7) // 8), "big")
    buf += struct.pack("<I", len(raw)) + raw


def _get_ints(data: bytes, offset: int, count: int) -> list[int]:
    out = []
    for _ in range(count):
        if offset + 4 > len(data):
            raise HEError(f"truncated key file at byte {offset}")
        (ln,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + ln > len(data):
            raise HEError(f"truncated key file at byte {offset}")
        out.append(int.from_bytes(data[offset:offset + ln], "big"))
        offset += ln
    if offset != len(data):
        raise HEError(f"trailing bytes in key file at byte {offset}")
    return out


def dump_public_key(pk: PublicKey) -> bytes:
    buf = bytearray([KEY_FORMAT_VERSION, _PUBLIC_TAG])
    _put_int(buf, pk.n)
    return bytes(buf)


def dump_private_key(sk: PrivateKey) -> bytes:
    buf = bytearray([KEY_FORMAT_VERSION, _PRIVATE_TAG])
    for v in (sk.public.n, sk.lam, sk.mu, sk.p, sk.q):
        _put_int(buf, v)
    return bytes(buf)


def load_key(data: bytes) -> PublicKey | Keypair:
    """Parse output of :func:`dump_public_key` or :func:`dump_private_key`."""
    if len(data) < 2 or data[0] != KEY_FORMAT_VERSION:
        raise HEError("unsupported key file version")
    if data[1] == _PUBLIC_TAG:
        (n,) = _get_ints(data, 2, 1)
        return PublicKey(n)
    if data[1] == _PRIVATE_TAG:
        n, lam, mu, p, q = _get_ints(data, 2, 5)
        kp = Keypair.from_primes(p, q)
        if kp.public.n != n or kp.private.lam != lam or kp.private.mu != mu:
            raise HEError("inconsistent private key fields")
        return kp
    raise HEError(f"unknown key kind {data[1]}")
