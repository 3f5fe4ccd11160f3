"""Cryptographic primitives consumed by the protocol.

Entities only talk to :class:`CryptoSuite`; the implementation class selects
the energy-cost row and nothing else, so every class is functionally
identical. All randomness is supplied by the caller's seeded ``random.Random``.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
from dataclasses import dataclass
from typing import Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.cmac import CMAC
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .types import KEY_BYTES, MAC_BYTES, PUBKEY_BYTES, SIG_BYTES, KeyRole, SymmetricKey

IV_BYTES = 8
TAG_BYTES = MAC_BYTES
AEAD_OVERHEAD = IV_BYTES + TAG_BYTES
BLOCK_BYTES = 16

_CURVE = ec.SECP192R1()
_CURVE_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFF99DEF836146BC9B1B4D22831
_SCALAR_BYTES = 24

_ENC_LABEL = b"\x01etm-enc"
_MAC_LABEL = b"\x02etm-mac"
_MAC_PREFIX = b"\x00"

KeyLike = Union[SymmetricKey, bytes]


class AuthenticationError(Exception):
    """Ciphertext or tag rejected; no plaintext is released."""


class HandshakeError(Exception):
    """Peer DH value is not a valid group element."""


class ImplementationClass(enum.Enum):
    HARDWARE_AES = "hw-aes"
    SOFTWARE_AES = "sw-aes"
    SOFTWARE_SPECK = "sw-speck"
    SOFTWARE_MISTY1 = "sw-misty1"


def _raw(key: KeyLike) -> bytes:
    raw = key.raw if isinstance(key, SymmetricKey) else bytes(key)
    if len(raw) != KEY_BYTES:
        raise ValueError("keys are 128 bits")
    return raw


def _cmac(raw_key: bytes, data: bytes) -> bytes:
    c = CMAC(algorithms.AES(raw_key))
    c.update(data)
    return c.finalize()


def _ctr(raw_key: bytes, iv: bytes, data: bytes) -> bytes:
    ctx = Cipher(algorithms.AES(raw_key), modes.CTR(iv + bytes(BLOCK_BYTES - IV_BYTES))).encryptor()
    return ctx.update(data) + ctx.finalize()


def etm_subkeys(key: KeyLike) -> tuple[bytes, bytes]:
    """Derive the (encryption, MAC) subkeys of one session key."""
    raw = _raw(key)
    return _cmac(raw, _ENC_LABEL), _cmac(raw, _MAC_LABEL)


@dataclass(frozen=True)
class KeyPair:
    private: ec.EllipticCurvePrivateKey
    public: bytes  # compressed point

    @classmethod
    def generate(cls, rng: random.Random) -> "KeyPair":
        scalar = rng.getrandbits(192) % (_CURVE_ORDER - 1) + 1
        priv = ec.derive_private_key(scalar, _CURVE)
        return cls(priv, _public_bytes(priv.public_key()))


def _public_bytes(pub: ec.EllipticCurvePublicKey) -> bytes:
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    return pub.public_bytes(Encoding.X962, PublicFormat.CompressedPoint)


def _load_public(data: bytes) -> ec.EllipticCurvePublicKey:
    if len(data) != PUBKEY_BYTES:
        raise HandshakeError("public value has wrong length")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, bytes(data))
    except ValueError as exc:
        raise HandshakeError(str(exc)) from exc


@dataclass(frozen=True)
class CryptoSuite:
    implementation: ImplementationClass = ImplementationClass.HARDWARE_AES
    hash_bits: int = 256

    def __post_init__(self) -> None:
        if self.hash_bits % 8 or self.hash_bits <= 0:
            raise ValueError("hash width must be a positive multiple of 8")

    # -- symmetric --------------------------------------------------------

    def aead_encrypt(self, key: KeyLike, plaintext: bytes, associated_data: bytes, rng: random.Random) -> bytes:
        """Encrypt-then-MAC: ``iv || AES-CTR(ct) || CMAC(ad, iv, ct)``."""
        enc, mac = etm_subkeys(key)
        iv = rng.randbytes(IV_BYTES)
        ct = _ctr(enc, iv, plaintext)
        return iv + ct + _cmac(mac, _aead_mac_input(associated_data, iv, ct))

    def aead_decrypt(self, key: KeyLike, blob: bytes, associated_data: bytes) -> bytes:
        if len(blob) < AEAD_OVERHEAD:
            raise AuthenticationError("ciphertext shorter than AEAD overhead")
        enc, mac = etm_subkeys(key)
        iv, ct, tag = blob[:IV_BYTES], blob[IV_BYTES:-TAG_BYTES], blob[-TAG_BYTES:]
        if not hmac.compare_digest(tag, _cmac(mac, _aead_mac_input(associated_data, iv, ct))):
            raise AuthenticationError("tag mismatch")
        return _ctr(enc, iv, ct)

    def mac(self, key: KeyLike, message: bytes) -> bytes:
        return _cmac(_raw(key), _MAC_PREFIX + message)

    def verify_mac(self, key: KeyLike, message: bytes, tag: bytes) -> bool:
        return hmac.compare_digest(self.mac(key, message), bytes(tag))

    def hash(self, data: bytes) -> bytes:
        if self.hash_bits == 256:
            return hashlib.sha256(data).digest()
        return hashlib.shake_256(data).digest(self.hash_bits // 8)

    # -- asymmetric -------------------------------------------------------

    def sign(self, keypair: KeyPair, message: bytes) -> bytes:
        der = keypair.private.sign(message, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))
        r, s = decode_dss_signature(der)
        return r.to_bytes(_SCALAR_BYTES, "big") + s.to_bytes(_SCALAR_BYTES, "big")

    def verify_sig(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        if len(signature) != SIG_BYTES:
            return False
        try:
            pub = _load_public(public_key)
        except HandshakeError:
            return False
        r = int.from_bytes(signature[:_SCALAR_BYTES], "big")
        s = int.from_bytes(signature[_SCALAR_BYTES:], "big")
        if not (0 < r < _CURVE_ORDER and 0 < s < _CURVE_ORDER):
            return False
        try:
            pub.verify(encode_dss_signature(r, s), message, ec.ECDSA(hashes.SHA256()))
        except InvalidSignature:
            return False
        return True

    def dh_exchange(
        self, own: KeyPair, peer_public: bytes, context: bytes = b"", role: KeyRole = KeyRole.SESSION_RS
    ) -> SymmetricKey:
        """ECDH on P-192 followed by HKDF-SHA256 down to a 128-bit key."""
        shared = own.private.exchange(ec.ECDH(), _load_public(peer_public))
        okm = HKDF(algorithm=hashes.SHA256(), length=KEY_BYTES, salt=None, info=b"imdsec-dh" + context).derive(shared)
        return SymmetricKey(okm, role)


def _aead_mac_input(ad: bytes, iv: bytes, ct: bytes) -> bytes:
    return len(ad).to_bytes(2, "big") + ad + iv + ct


def blocks(nbytes: int) -> int:
    """Number of 16-byte cipher blocks touched by ``nbytes`` of data."""
    return -(-nbytes // BLOCK_BYTES)


@dataclass(frozen=True)
class ToyDH:
    """A 16-bit safe-prime group. Only for brute-force oracle demonstrations."""

    p: int = 65267
    g: int = 2

    def keypair(self, rng: random.Random) -> tuple[int, int]:
        x = rng.randrange(2, self.p - 1)
        return x, pow(self.g, x, self.p)

    def shared(self, own_secret: int, peer_public: int) -> int:
        if not 1 < peer_public < self.p - 1:
            raise HandshakeError("peer value outside group")
        return pow(peer_public, own_secret, self.p)

    def discrete_log(self, public: int) -> int:
        acc = 1
        for x in range(self.p - 1):
            if acc == public:
                return x
            acc = acc * self.g % self.p
        raise ValueError("no discrete log")
