"""Cryptographic building blocks for the PSI protocols and result sealing.

* RSA blind signatures (receiver blinds, sender signs, receiver unblinds).
* A Diffie-Hellman OPRF in the quadratic-residue subgroup of a 256-bit safe
  prime, so every group element serializes to exactly 32 bytes.
* Sealed envelopes: X25519 ephemeral key agreement + HKDF + AES-GCM.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass

import gmpy2
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .wire import ELEMENT_BYTES

HASH_BYTES = 32
PUBLIC_EXPONENT = 65537
DEFAULT_RSA_BITS = 2048
TEST_RSA_BITS = 512
MIN_RSA_BITS = 256


class CryptoError(ValueError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def id_bytes(sample_id: int) -> bytes:
    return int(sample_id).to_bytes(8, "little")


# -- RSA blind signatures ---------------------------------------------------

@dataclass(frozen=True)
class RsaPublicKey:
    n: int
    e: int

    @property
    def width(self) -> int:
        """Byte width of a residue mod n."""
        return (self.n.bit_length() + 7) // 8


@dataclass(frozen=True)
class RsaKeyPair:
    n: int
    e: int
    d: int
    p: int
    q: int

    @property
    def public(self) -> RsaPublicKey:
        return RsaPublicKey(self.n, self.e)

    @property
    def bits(self) -> int:
        return self.n.bit_length()


def _random_prime(bits: int, rng: secrets.SystemRandom) -> gmpy2.mpz:
    while True:
        cand = gmpy2.mpz(rng.getrandbits(bits)) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        p = gmpy2.next_prime(cand)
        if p.bit_length() == bits:
            return p


def generate_rsa_keypair(bits: int = DEFAULT_RSA_BITS, e: int = PUBLIC_EXPONENT,
                         seed: int | None = None) -> RsaKeyPair:
    """RSA key with an exact ``bits``-bit modulus; ``d = e^-1 mod lcm(p-1, q-1)``.

    ``seed`` makes generation reproducible (test use only).
    """
    if bits < MIN_RSA_BITS or bits % 2:
        raise CryptoError(f"modulus size must be an even number >= {MIN_RSA_BITS}")
    rng = secrets.SystemRandom() if seed is None else _SeededRandom(seed)
    while True:
        p = _random_prime(bits // 2, rng)
        q = _random_prime(bits // 2, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != bits:
            continue
        lam = gmpy2.lcm(p - 1, q - 1)
        if gmpy2.gcd(e, lam) != 1:
            continue
        d = gmpy2.invert(e, lam)
        return RsaKeyPair(int(n), e, int(d), int(p), int(q))


class _SeededRandom:
    def __init__(self, seed: int):
        import random
        self._r = random.Random(seed)

    def getrandbits(self, k: int) -> int:
        return self._r.getrandbits(k)


def hash_to_modulus(sample_id: int, pk: RsaPublicKey) -> int:
    """SHA-256 of the id as a big-endian integer, reduced mod n."""
    return int.from_bytes(sha256(id_bytes(sample_id)), "big") % pk.n


def random_blinding_factor(pk: RsaPublicKey) -> int:
    while True:
        r = secrets.randbelow(pk.n - 2) + 2
        if gmpy2.gcd(r, pk.n) == 1:
            return r


def _check_residue(x: int, pk: RsaPublicKey) -> None:
    if not 0 <= x < pk.n:
        raise CryptoError("value out of range [0, n)")


def blind(x: int, r: int, pk: RsaPublicKey) -> int:
    _check_residue(x, pk)
    if not 1 < r < pk.n or gmpy2.gcd(r, pk.n) != 1:
        raise CryptoError("blinding factor must be a unit in (1, n); draw again")
    return int(gmpy2.f_mod(gmpy2.mpz(x) * gmpy2.powmod(r, pk.e, pk.n), pk.n))


def sign_blinded(blinded: int, sk: RsaKeyPair) -> int:
    _check_residue(blinded, sk.public)
    return _sign_crt(blinded, sk)


def unblind(blind_sig: int, r: int, pk: RsaPublicKey) -> int:
    _check_residue(blind_sig, pk)
    return int(gmpy2.f_mod(gmpy2.mpz(blind_sig) * gmpy2.invert(r, pk.n), pk.n))


def sign_direct(x: int, sk: RsaKeyPair) -> int:
    _check_residue(x, sk.public)
    return _sign_crt(x, sk)


def _sign_crt(x: int, sk: RsaKeyPair) -> int:
    p, q = sk.p, sk.q
    sp = gmpy2.powmod(x % p, sk.d % (p - 1), p)
    sq = gmpy2.powmod(x % q, sk.d % (q - 1), q)
    h = gmpy2.f_mod(gmpy2.invert(q, p) * (sp - sq), p)
    return int(sq + h * q)


def signature_digest(sig: int, pk: RsaPublicKey) -> bytes:
    """Second hash H' over the fixed-width signature value."""
    return sha256(int(sig).to_bytes(pk.width, "big"))


# -- DH-OPRF ----------------------------------------------------------------

# 256-bit safe prime p = 2q + 1; the quadratic residues form the order-q group.
GROUP_P = 0x800000000000020000000000000000000000000000000000000000000000551B
GROUP_Q = (GROUP_P - 1) // 2
_P = gmpy2.mpz(GROUP_P)
_Q = gmpy2.mpz(GROUP_Q)


@dataclass(frozen=True)
class GroupElement:
    """Residue-subgroup element. Membership is checked where bytes come off
    the wire; values produced by hashing or exponentiation are members."""

    value: int

    def to_bytes(self) -> bytes:
        return int(self.value).to_bytes(ELEMENT_BYTES, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GroupElement":
        if len(raw) != ELEMENT_BYTES:
            raise CryptoError("group elements are 32 bytes")
        value = int.from_bytes(raw, "big")
        if not is_group_member(value):
            raise CryptoError("not a member of the prime-order subgroup")
        return cls(value)

    def __pow__(self, k: int) -> "GroupElement":
        return GroupElement(int(gmpy2.powmod(self.value, k, _P)))


def is_group_member(v: int) -> bool:
    return 1 <= v < GROUP_P and gmpy2.powmod(v, _Q, _P) == 1


def hash_to_group(sample_id: int) -> GroupElement:
    """H1: SHA-256 into Z_p*, squared to land in the residue subgroup."""
    h = gmpy2.mpz(int.from_bytes(sha256(b"H1" + id_bytes(sample_id)), "big")) % _P
    if h == 0:
        h = gmpy2.mpz(1)
    return GroupElement(int(gmpy2.powmod(h, 2, _P)))


def random_scalar() -> int:
    return secrets.randbelow(GROUP_Q - 1) + 1


def _check_scalar(k: int) -> None:
    if not 1 <= k < GROUP_Q:
        raise CryptoError("OPRF key must lie in [1, q)")


def finalize(element: GroupElement) -> bytes:
    """H2 over the canonical encoding."""
    return sha256(b"H2" + element.to_bytes())


def dh_oprf(k: int, sample_id: int) -> bytes:
    _check_scalar(k)
    return finalize(hash_to_group(sample_id) ** k)


def dh_oprf_multi(keys: list[int], sample_id: int) -> list[bytes]:
    """PRF outputs of one id under several keys, hashing into the group once."""
    for k in keys:
        _check_scalar(k)
    h = hash_to_group(sample_id)
    return [finalize(h ** k) for k in keys]


def oprf_blind(sample_id: int, b: int) -> GroupElement:
    _check_scalar(b)
    return hash_to_group(sample_id) ** b


def oprf_evaluate(blinded: GroupElement, k: int) -> GroupElement:
    _check_scalar(k)
    return blinded ** k


def oprf_unblind(evaluated: GroupElement, b: int) -> GroupElement:
    return evaluated ** int(gmpy2.invert(b, _Q))


# -- sealed envelopes -------------------------------------------------------

@dataclass(frozen=True)
class SealedEnvelope:
    ciphertext: bytes
    recipient_key_id: bytes

    def to_bytes(self) -> bytes:
        return self.recipient_key_id + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedEnvelope":
        if len(raw) < KEY_ID_BYTES + _EPHEMERAL + _NONCE + _TAG:
            raise CryptoError("sealed envelope too short")
        return cls(raw[KEY_ID_BYTES:], raw[:KEY_ID_BYTES])


KEY_ID_BYTES = 8
_EPHEMERAL = 32
_NONCE = 12
_TAG = 16


@dataclass(frozen=True)
class EnvelopeKeyPair:
    private: bytes
    public: bytes

    @property
    def key_id(self) -> bytes:
        return key_id(self.public)


def key_id(public: bytes) -> bytes:
    return sha256(public)[:KEY_ID_BYTES]


def generate_envelope_keypair() -> EnvelopeKeyPair:
    sk = X25519PrivateKey.generate()
    raw_sk = sk.private_bytes(serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
                              serialization.NoEncryption())
    raw_pk = sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return EnvelopeKeyPair(raw_sk, raw_pk)


def _derive(shared: bytes, eph_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                info=b"vflpipe-envelope" + eph_pub + recipient_pub).derive(shared)


def envelope_seal(plaintext: bytes, public: bytes) -> SealedEnvelope:
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    key = _derive(eph.exchange(X25519PublicKey.from_public_bytes(public)), eph_pub, public)
    nonce = secrets.token_bytes(_NONCE)
    ct = AESGCM(key).encrypt(nonce, bytes(plaintext), eph_pub)
    return SealedEnvelope(eph_pub + nonce + ct, key_id(public))


def envelope_open(env: SealedEnvelope, keys: EnvelopeKeyPair) -> bytes:
    if env.recipient_key_id != keys.key_id:
        raise CryptoError("envelope sealed for a different key")
    eph_pub = env.ciphertext[:_EPHEMERAL]
    nonce = env.ciphertext[_EPHEMERAL:_EPHEMERAL + _NONCE]
    sk = X25519PrivateKey.from_private_bytes(keys.private)
    key = _derive(sk.exchange(X25519PublicKey.from_public_bytes(eph_pub)), eph_pub, keys.public)
    try:
        return AESGCM(key).decrypt(nonce, env.ciphertext[_EPHEMERAL + _NONCE:], eph_pub)
    except InvalidTag:
        raise CryptoError("envelope authentication failed") from None


# -- batch sealing ------------------------------------------------------------
# One key agreement per batch, then one AEAD ciphertext per record. Record i
# uses nonce i and authenticates its position tag, so records cannot be
# swapped between positions undetected.

BATCH_HEADER_BYTES = KEY_ID_BYTES + _EPHEMERAL


def seal_records(records: list[bytes], tags: list[bytes], public: bytes) -> tuple[bytes, list[bytes]]:
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    aead = AESGCM(_derive(eph.exchange(X25519PublicKey.from_public_bytes(public)), eph_pub, public))
    out = [aead.encrypt(i.to_bytes(_NONCE, "big"), rec, tag)
           for i, (rec, tag) in enumerate(zip(records, tags))]
    return key_id(public) + eph_pub, out


def open_records(header: bytes, ciphertexts: list[tuple[int, bytes, bytes]],
                 keys: EnvelopeKeyPair) -> list[bytes]:
    """``ciphertexts`` holds (record index, tag, ciphertext) triples."""
    if header[:KEY_ID_BYTES] != keys.key_id:
        raise CryptoError("records sealed for a different key")
    eph_pub = header[KEY_ID_BYTES:BATCH_HEADER_BYTES]
    sk = X25519PrivateKey.from_private_bytes(keys.private)
    aead = AESGCM(_derive(sk.exchange(X25519PublicKey.from_public_bytes(eph_pub)), eph_pub, keys.public))
    try:
        return [aead.decrypt(i.to_bytes(_NONCE, "big"), ct, tag) for i, tag, ct in ciphertexts]
    except InvalidTag:
        raise CryptoError("record authentication failed") from None
