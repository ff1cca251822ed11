"""
Evidence record and its canonical byte layout.

    offset  size  field
    0       32    anchor      SHA-256(G_a || G_v)
    32      4     version     big-endian unsigned
    36      32    claim       SHA-256 of the Wasm bytecode
    68      65    attestation public key (SEC1 uncompressed)
    133     64    ECDSA signature over bytes [0, 133)
    ------
    197
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from . import crypto
from .errors import MalformedEvidenceError

ANCHOR_LEN = 32
CLAIM_LEN = 32
SIGNED_LEN = 133
EVIDENCE_LEN = 197
CURRENT_VERSION = 1

_LAYOUT = struct.Struct("!32sI32s65s64s")
assert _LAYOUT.size == EVIDENCE_LEN


@dataclass(frozen=True)
class Evidence:
    anchor: bytes
    version: int
    claim: bytes
    attestation_public_key: bytes
    signature: bytes

    def to_hex(self) -> str:
        return serialize_evidence(self).hex()

    @classmethod
    def from_hex(cls, text: str) -> "Evidence":
        try:
            raw = bytes.fromhex(text.strip())
        except ValueError as exc:
            raise MalformedEvidenceError(f"not hex: {exc}") from None
        return parse_evidence(raw)

    def describe(self) -> dict:
        return {
            "anchor": self.anchor.hex(),
            "version": self.version,
            "claim": self.claim.hex(),
            "attestation_public_key": self.attestation_public_key.hex(),
            "signature": self.signature.hex(),
        }


def compute_anchor(g_a: bytes, g_v: bytes) -> bytes:
    return crypto.sha256(g_a + g_v)


def serialize_evidence(ev: Evidence) -> bytes:
    for name, value, n in (
        ("anchor", ev.anchor, ANCHOR_LEN),
        ("claim", ev.claim, CLAIM_LEN),
        ("attestation_public_key", ev.attestation_public_key, crypto.POINT_LEN),
        ("signature", ev.signature, crypto.SIGNATURE_LEN),
    ):
        if len(value) != n:
            raise MalformedEvidenceError(f"{name}: expected {n} bytes, got {len(value)}")
    if not 0 <= ev.version <= 0xFFFFFFFF:
        raise MalformedEvidenceError("version does not fit in 32 bits")
    return _LAYOUT.pack(ev.anchor, ev.version, ev.claim, ev.attestation_public_key, ev.signature)


def parse_evidence(data: bytes) -> Evidence:
    if len(data) != EVIDENCE_LEN:
        raise MalformedEvidenceError(f"evidence must be {EVIDENCE_LEN} bytes, got {len(data)}")
    return Evidence(*_LAYOUT.unpack(data))


def signed_region(serialized: bytes) -> bytes:
    if len(serialized) != EVIDENCE_LEN:
        raise MalformedEvidenceError(f"evidence must be {EVIDENCE_LEN} bytes, got {len(serialized)}")
    return serialized[:SIGNED_LEN]


def unsigned_bytes(anchor: bytes, version: int, claim: bytes, public_key: bytes) -> bytes:
    """The signed region for the given fields (signature not yet known)."""
    return _LAYOUT.pack(anchor, version, claim, public_key, bytes(64))[:SIGNED_LEN]


def verify_evidence(ev: Evidence) -> bool:
    return crypto.ecdsa_verify(
        ev.attestation_public_key, signed_region(serialize_evidence(ev)), ev.signature
    )
