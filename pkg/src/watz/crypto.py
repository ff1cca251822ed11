"""Cryptographic primitives for the attestation protocol.

Suite: P-256 (secp256r1) ECDHE and ECDSA/SHA-256, AES-128-CMAC, AES-128-GCM,
SHA-256. Points travel as 65-byte uncompressed SEC1 encodings and ECDSA
signatures as raw ``r || s`` (32 bytes each, big-endian, low-s).
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import cmac as _cmac
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers import algorithms
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import DecryptionError, InvalidPointError

# P-256 domain parameters
P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
P256_GX = 0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296
P256_GY = 0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5

POINT_LEN = 65
SCALAR_LEN = 32
SIGNATURE_LEN = 64
KEY_LEN = 16
IV_LEN = 12
TAG_LEN = 16

# SGX-style derivation labels: 0x01 || label || 0x00 || 0x0080 (LE bit length)
SMK_LABEL = b"\x01SMK\x00\x80\x00"
SK_LABEL = b"\x01SK\x00\x80\x00"
ATTEST_DOMAIN = b"WATZ-ATTEST-V1"
MAX_KEYGEN_ITERATIONS = 1000

_CURVE = ec.SECP256R1()
_ECDSA = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)

EntropySource = Callable[[int], bytes]


class EntropyError(RuntimeError):
    """The entropy source failed; there is no safe way to continue."""


@dataclass(frozen=True)
class KeyPair:
    private_scalar: int = field(repr=False)
    public_point: bytes
    _key: ec.EllipticCurvePrivateKey = field(repr=False, compare=False)

    @classmethod
    def from_scalar(cls, scalar: int):
        if not 1 <= scalar < P256_ORDER:
            raise ValueError("private scalar out of range")
        key = ec.derive_private_key(scalar, _CURVE)
        return cls(scalar, encode_public_key(key.public_key()), key)

    def private_bytes(self) -> bytes:
        return self.private_scalar.to_bytes(SCALAR_LEN, "big")


class SessionKeyPair(KeyPair):
    """Ephemeral ECDHE key pair for one protocol run."""


class AttestationKeyPair(KeyPair):
    """Device key pair derived from the root-of-trust seed."""


class IdentityKeyPair(KeyPair):
    """Long-term verifier identity."""


@dataclass(frozen=True)
class SessionKeys:
    kdk: bytes = field(repr=False)
    km: bytes = field(repr=False)
    ke: bytes = field(repr=False)
    _km_ctx: Optional[_cmac.CMAC] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._km_ctx is None:
            object.__setattr__(self, "_km_ctx", _cmac.CMAC(algorithms.AES(self.km)))

    def mac(self, message: bytes) -> bytes:
        """CMAC under Km, reusing the expanded key schedule."""
        c = self._km_ctx.copy()
        c.update(message)
        return c.finalize()


PrivateKey = Union[int, KeyPair]


def encode_public_key(key: ec.EllipticCurvePublicKey) -> bytes:
    return key.public_bytes(Encoding.X962, PublicFormat.UncompressedPoint)


def decode_point(point: bytes) -> ec.EllipticCurvePublicKey:
    """Parse an uncompressed SEC1 point, rejecting anything off-curve."""
    if len(point) != POINT_LEN or point[0] != 0x04:
        raise InvalidPointError("expected a 65-byte uncompressed SEC1 point")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, bytes(point))
    except ValueError as exc:
        raise InvalidPointError(str(exc)) from None


def is_valid_point(point: bytes) -> bool:
    try:
        decode_point(point)
    except InvalidPointError:
        return False
    return True


def _private_key(private: PrivateKey) -> ec.EllipticCurvePrivateKey:
    if isinstance(private, KeyPair):
        return private._key
    return ec.derive_private_key(private, _CURVE)


def gen_session_keypair(
    entropy_source: Optional[EntropySource] = None, *, private_scalar: Optional[int] = None
) -> SessionKeyPair:
    """Generate a fresh ephemeral key pair.

    ``private_scalar`` is a test hook that bypasses the entropy source.
    """
    if private_scalar is not None:
        return SessionKeyPair.from_scalar(private_scalar)
    entropy_source = entropy_source or os.urandom
    for _ in range(MAX_KEYGEN_ITERATIONS):
        try:
            raw = entropy_source(SCALAR_LEN)
        except Exception as exc:
            raise EntropyError("entropy source failed") from exc
        if len(raw) != SCALAR_LEN:
            raise EntropyError("entropy source returned a short read")
        scalar = int.from_bytes(raw, "big")
        if 1 <= scalar < P256_ORDER:
            return SessionKeyPair.from_scalar(scalar)
    raise EntropyError("entropy source never produced a valid scalar")


def ecdh_shared_secret(private: PrivateKey, peer_public_point: bytes) -> bytes:
    """x-coordinate (32 bytes, big-endian) of ``private * peer``."""
    peer = decode_point(peer_public_point)
    return _private_key(private).exchange(ec.ECDH(), peer)


def cmac(key: bytes, message: bytes) -> bytes:
    c = _cmac.CMAC(algorithms.AES(key))
    c.update(message)
    return c.finalize()


def mac_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


def derive_session_keys(shared: bytes) -> SessionKeys:
    if len(shared) != SCALAR_LEN:
        raise ValueError("shared secret must be 32 bytes")
    kdk = cmac(bytes(KEY_LEN), shared[::-1])
    return SessionKeys(kdk=kdk, km=cmac(kdk, SMK_LABEL), ke=cmac(kdk, SK_LABEL))


def ecdsa_sign(private: PrivateKey, message: bytes, *, low_s: bool = True) -> bytes:
    """Deterministic (RFC 6979) ECDSA over SHA-256(message).

    ``low_s=False`` returns the raw RFC 6979 output, which
    :func:`ecdsa_verify` rejects when its s lies in the upper half.
    """
    der = _private_key(private).sign(message, _ECDSA)
    r, s = decode_dss_signature(der)
    if low_s and s > P256_ORDER // 2:
        s = P256_ORDER - s
    return r.to_bytes(SCALAR_LEN, "big") + s.to_bytes(SCALAR_LEN, "big")


def ecdsa_verify(public_point: bytes, message: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_LEN:
        return False
    r = int.from_bytes(signature[:SCALAR_LEN], "big")
    s = int.from_bytes(signature[SCALAR_LEN:], "big")
    if not (1 <= r < P256_ORDER and 1 <= s <= P256_ORDER // 2):
        return False
    try:
        key = decode_point(public_point)
        key.verify(encode_dss_signature(r, s), message, _ECDSA)
    except (InvalidPointError, InvalidSignature):
        return False
    return True


def aead_encrypt(ke: bytes, iv: bytes, plaintext: bytes) -> bytes:
    if len(iv) != IV_LEN:
        raise ValueError("iv must be 12 bytes")
    return AESGCM(ke).encrypt(iv, plaintext, None)


def aead_decrypt(ke: bytes, iv: bytes, ciphertext: bytes) -> bytes:
    if len(iv) != IV_LEN:
        raise ValueError("iv must be 12 bytes")
    if len(ciphertext) < TAG_LEN:
        raise DecryptionError("ciphertext shorter than the tag")
    try:
        return AESGCM(ke).decrypt(iv, ciphertext, None)
    except InvalidTag:
        raise DecryptionError("authentication tag mismatch") from None


def sha256(message: bytes) -> bytes:
    return hashlib.sha256(message).digest()


def derive_attestation_keypair(seed: bytes) -> AttestationKeyPair:
    """Deterministically derive the device key pair from a 32-byte seed.

    subkey = SHA-256(domain || seed); the scalar is the first
    SHA-256(subkey || counter_be32) in [1, n-1].
    """
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    subkey = sha256(ATTEST_DOMAIN + seed)
    for i in range(MAX_KEYGEN_ITERATIONS):
        scalar = int.from_bytes(sha256(subkey + i.to_bytes(4, "big")), "big")
        if 1 <= scalar < P256_ORDER:
            return AttestationKeyPair.from_scalar(scalar)
    raise RuntimeError("attestation key derivation did not converge")


def identity_from_private_bytes(raw: bytes) -> IdentityKeyPair:
    if len(raw) != SCALAR_LEN:
        raise ValueError("identity private key must be 32 bytes")
    return IdentityKeyPair.from_scalar(int.from_bytes(raw, "big"))


def generate_identity(entropy_source: Optional[EntropySource] = None) -> IdentityKeyPair:
    return IdentityKeyPair.from_scalar(gen_session_keypair(entropy_source).private_scalar)
