"""Simulated trusted-kernel attestation service.

The service is the only holder of the root-of-trust seed and of the private
attestation key; callers only get the public key and signed evidence.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Union

from . import crypto
from .errors import ConfigError
from .evidence import CURRENT_VERSION, Evidence, unsigned_bytes

SEED_ENV_VAR = "WATZ_ROOT_SEED"


def parse_seed_hex(text: str) -> bytes:
    text = text.strip()
    if len(text) != 64:
        raise ConfigError("root-of-trust seed must be 64 hex characters")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise ConfigError("root-of-trust seed is not valid hex") from None


def load_seed(path: Optional[Union[str, Path]] = None) -> bytes:
    """Read the seed from ``path`` or, failing that, from ``$WATZ_ROOT_SEED``."""
    if path is not None:
        try:
            return parse_seed_hex(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read seed file {path}: {exc.strerror}") from None
    if SEED_ENV_VAR in os.environ:
        return parse_seed_hex(os.environ[SEED_ENV_VAR])
    raise ConfigError(f"no seed file given and {SEED_ENV_VAR} is unset")


class AttestationService:
    __slots__ = ("_seed", "_keypair", "_version")

    def __init__(self, seed: bytes, version: int = CURRENT_VERSION):
        if not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
            raise ConfigError("root-of-trust seed must be exactly 32 bytes")
        if not 0 <= version <= 0xFFFFFFFF:
            raise ConfigError("version must fit in 32 bits")
        self._seed = bytes(seed)
        self._keypair = crypto.derive_attestation_keypair(self._seed)
        self._version = version

    def __repr__(self):
        return f"AttestationService(version={self._version}, public_key={self.public_attestation_key().hex()[:16]}...)"

    def __reduce__(self):
        raise TypeError("AttestationService cannot be pickled")

    @property
    def version(self) -> int:
        return self._version

    def public_attestation_key(self) -> bytes:
        return self._keypair.public_point

    def issue_evidence(self, anchor: bytes, claim: bytes) -> Evidence:
        if len(anchor) != 32 or len(claim) != 32:
            raise ValueError("anchor and claim must both be 32 bytes")
        pub = self._keypair.public_point
        region = unsigned_bytes(anchor, self._version, claim, pub)
        signature = crypto.ecdsa_sign(self._keypair, region)
        return Evidence(bytes(anchor), self._version, bytes(claim), pub, signature)


def init(seed: bytes, version: int = CURRENT_VERSION) -> AttestationService:
    return AttestationService(seed, version)
