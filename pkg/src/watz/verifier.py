"""Verifier side: appraisal policy, secret provisioning and the TCP listener."""

from __future__ import annotations

import enum
import json
import logging
import os
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Iterable, Optional, Tuple

from . import crypto, wire
from .errors import (
    ConfigError,
    FrameError,
    InvalidPointError,
    MalformedMessageError,
    StateError,
    WatzError,
)
from .evidence import compute_anchor, parse_evidence, signed_region
from .timing import ASYMMETRIC, KEYGEN, MEMORY, NULL_RECORDER, SYMMETRIC
from .wire import Msg0Payload, Msg1Payload, Msg2Payload, Msg3Payload, MsgType

log = logging.getLogger(__name__)

MAX_SECRET = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0

# Appraisal reasons, in check order.
MAC_MISMATCH = "mac-mismatch"
GA_MISMATCH = "ga-mismatch"
ANCHOR_MISMATCH = "anchor-mismatch"
UNENDORSED_DEVICE = "unendorsed-device"
BAD_EVIDENCE_SIGNATURE = "bad-evidence-signature"
STALE_VERSION = "stale-version"
UNKNOWN_CLAIM = "unknown-claim"
MALFORMED_EVIDENCE = "malformed-evidence"
REASONS = (MAC_MISMATCH, GA_MISMATCH, ANCHOR_MISMATCH, UNENDORSED_DEVICE,
           BAD_EVIDENCE_SIGNATURE, STALE_VERSION, UNKNOWN_CLAIM)


@dataclass(frozen=True)
class VerifierConfig:
    identity: crypto.IdentityKeyPair
    endorsements: FrozenSet[bytes]
    reference_values: FrozenSet[bytes]
    min_version: int = 1
    secret_blob: bytes = field(default=b"", repr=False)
    listen_address: str = "127.0.0.1:7000"

    def __post_init__(self):
        object.__setattr__(self, "endorsements", frozenset(bytes(k) for k in self.endorsements))
        object.__setattr__(self, "reference_values", frozenset(bytes(v) for v in self.reference_values))
        for key in self.endorsements:
            if not crypto.is_valid_point(key):
                raise ConfigError(f"endorsement {key.hex()[:16]}... is not a valid P-256 point")
        for ref in self.reference_values:
            if len(ref) != 32:
                raise ConfigError("reference values must be 32-byte digests")
        if len(self.secret_blob) > MAX_SECRET:
            raise ConfigError("secret blob exceeds 16 MiB")
        if not 0 <= self.min_version <= 0xFFFFFFFF:
            raise ConfigError("min_version must fit in 32 bits")

    def check_serving(self) -> None:
        if not self.endorsements:
            raise ConfigError("no endorsed attestation keys configured")
        if not self.reference_values:
            raise ConfigError("no reference values configured")


def _hex_list(raw, name: str) -> Iterable[bytes]:
    if not isinstance(raw, list):
        raise ConfigError(f"{name} must be a list of hex strings")
    try:
        return [bytes.fromhex(item) for item in raw]
    except (TypeError, ValueError):
        raise ConfigError(f"{name} contains a non-hex entry") from None


def load_config(path) -> VerifierConfig:
    """Load a JSON verifier config.

    Keys: identity_private_key, endorsements, reference_values, min_version,
    secret_blob_file (relative to the config file), listen_address.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    missing = {"identity_private_key", "endorsements", "reference_values", "secret_blob_file"} - raw.keys()
    if missing:
        raise ConfigError(f"config is missing keys: {', '.join(sorted(missing))}")
    try:
        identity = crypto.identity_from_private_bytes(bytes.fromhex(raw["identity_private_key"]))
    except (TypeError, ValueError):
        raise ConfigError("identity_private_key must be a 64-character hex scalar in [1, n-1]") from None
    secret_path = path.parent / raw["secret_blob_file"]
    try:
        secret = secret_path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read secret blob {secret_path}: {exc.strerror}") from None
    return VerifierConfig(
        identity=identity,
        endorsements=_hex_list(raw["endorsements"], "endorsements"),
        reference_values=_hex_list(raw["reference_values"], "reference_values"),
        min_version=int(raw.get("min_version", 1)),
        secret_blob=secret,
        listen_address=raw.get("listen_address", "127.0.0.1:7000"),
    )


def parse_address(address: str) -> Tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address {address!r} is not host:port")
    return host.strip("[]") or "127.0.0.1", int(port)


class Phase(enum.Enum):
    AWAIT_MSG0 = "await-msg0"
    AWAIT_MSG2 = "await-msg2"
    ACCEPTED = "accepted"
    PROVISIONED = "provisioned"
    FAILED = "failed"


@dataclass(frozen=True)
class AppraisalVerdict:
    outcome: str
    reason: Optional[str]
    claim: bytes

    @property
    def accepted(self) -> bool:
        return self.outcome == "accepted"


class VerifierSession:
    """Server-side state of one connection."""

    def __init__(self, config: VerifierConfig, *, keypair=None, entropy_source=None, recorder=None):
        self.config = config
        self.phase = Phase.AWAIT_MSG0
        self.peer_g_a: Optional[bytes] = None
        self.session_keypair: Optional[crypto.SessionKeyPair] = keypair
        self.session_keys: Optional[crypto.SessionKeys] = None
        self.verdict: Optional[AppraisalVerdict] = None
        self._entropy = entropy_source
        self._rec = recorder or NULL_RECORDER

    @property
    def g_v(self) -> bytes:
        return self.session_keypair.public_point

    def _expect(self, phase: Phase) -> None:
        if self.phase is not phase:
            raise StateError(f"verifier session is {self.phase.value}, expected {phase.value}")

    def handle_msg0(self, msg0: Msg0Payload) -> Msg1Payload:
        self._expect(Phase.AWAIT_MSG0)
        rec = self._rec
        with rec.span("msg0", KEYGEN):
            if self.session_keypair is None:
                self.session_keypair = crypto.gen_session_keypair(self._entropy)
            try:
                shared = crypto.ecdh_shared_secret(self.session_keypair, msg0.g_a)
            except InvalidPointError:
                self.phase = Phase.FAILED
                raise
            keys = crypto.derive_session_keys(shared)
        with rec.span("msg0", MEMORY):
            self.peer_g_a = msg0.g_a
            self.session_keys = keys
            g_v, v_id = self.g_v, self.config.identity.public_point
        with rec.span("msg1", ASYMMETRIC):
            signature = crypto.ecdsa_sign(self.config.identity, g_v + msg0.g_a)
        with rec.span("msg1", MEMORY):
            content = Msg1Payload.content(g_v, v_id, signature)
        with rec.span("msg1", SYMMETRIC):
            mac = keys.mac(content)
        with rec.span("msg1", MEMORY):
            msg1 = Msg1Payload(g_v, v_id, signature, mac)
        self.phase = Phase.AWAIT_MSG2
        return msg1

    def _reject(self, reason: str, claim: bytes) -> AppraisalVerdict:
        self.phase = Phase.FAILED
        self.verdict = AppraisalVerdict("rejected", reason, claim)
        return self.verdict

    def appraise_msg2(self, msg2: Msg2Payload) -> AppraisalVerdict:
        """Run the appraisal checks in fixed order; the first failure wins."""
        self._expect(Phase.AWAIT_MSG2)
        rec, cfg = self._rec, self.config
        no_claim = bytes(32)
        with rec.span("msg2", MEMORY):
            content = msg2.mac_region
        with rec.span("msg2", SYMMETRIC):
            mac_ok = crypto.mac_equal(self.session_keys.mac(content), msg2.mac)
        if not mac_ok:
            return self._reject(MAC_MISMATCH, no_claim)
        with rec.span("msg2", MEMORY):
            try:
                ev = parse_evidence(msg2.evidence)
            except MalformedMessageError:
                return self._reject(MALFORMED_EVIDENCE, no_claim)
            ga_ok = msg2.g_a == self.peer_g_a
        if not ga_ok:
            return self._reject(GA_MISMATCH, ev.claim)
        with rec.span("msg2", SYMMETRIC):
            anchor_ok = ev.anchor == compute_anchor(self.peer_g_a, self.g_v)
        if not anchor_ok:
            return self._reject(ANCHOR_MISMATCH, ev.claim)
        with rec.span("msg2", MEMORY):
            endorsed = ev.attestation_public_key in cfg.endorsements
        if not endorsed:
            return self._reject(UNENDORSED_DEVICE, ev.claim)
        with rec.span("msg2", ASYMMETRIC):
            sig_ok = msg2.signature == ev.signature and crypto.ecdsa_verify(
                ev.attestation_public_key, signed_region(msg2.evidence), ev.signature
            )
        if not sig_ok:
            return self._reject(BAD_EVIDENCE_SIGNATURE, ev.claim)
        if ev.version < cfg.min_version:
            return self._reject(STALE_VERSION, ev.claim)
        if ev.claim not in cfg.reference_values:
            return self._reject(UNKNOWN_CLAIM, ev.claim)
        self.phase = Phase.ACCEPTED
        self.verdict = AppraisalVerdict("accepted", None, ev.claim)
        return self.verdict

    def build_msg3(self, *, iv: Optional[bytes] = None) -> Msg3Payload:
        if self.phase is not Phase.ACCEPTED:
            raise StateError(f"no accepted appraisal (session is {self.phase.value}); refusing to send the secret")
        with self._rec.span("msg3", SYMMETRIC):
            iv = iv if iv is not None else os.urandom(crypto.IV_LEN)
            ciphertext = crypto.aead_encrypt(self.session_keys.ke, iv, self.config.secret_blob)
        self.phase = Phase.PROVISIONED
        return Msg3Payload(iv, ciphertext)


def handle_msg0(config: VerifierConfig, msg0: Msg0Payload, **kwargs):
    """Open a verifier session for ``msg0``; returns ``(session, msg1)``."""
    session = VerifierSession(config, **kwargs)
    return session, session.handle_msg0(msg0)


def appraise_msg2(session: VerifierSession, msg2: Msg2Payload) -> AppraisalVerdict:
    return session.appraise_msg2(msg2)


def build_msg3(session: VerifierSession) -> Msg3Payload:
    return session.build_msg3()


def _expect_frame(sock, expected: MsgType, payload_cls):
    msg_type, payload = wire.recv_frame(sock)
    if msg_type != expected:
        raise MalformedMessageError(f"expected {expected.name}, received {msg_type.name}")
    return payload_cls.decode(payload)


def run_connection(config: VerifierConfig, sock, peer: str = "-") -> Optional[AppraisalVerdict]:
    """Drive one protocol run over a connected socket; never raises."""
    session = VerifierSession(config)
    try:
        msg0 = _expect_frame(sock, MsgType.MSG0, Msg0Payload)
        msg1 = session.handle_msg0(msg0)
        wire.send_frame(sock, MsgType.MSG1, msg1.encode())
        msg2 = _expect_frame(sock, MsgType.MSG2, Msg2Payload)
        verdict = session.appraise_msg2(msg2)
        log.info(
            "appraisal outcome=%s reason=%s claim=%s peer=%s",
            verdict.outcome, verdict.reason or "-", verdict.claim.hex(), peer,
        )
        if verdict.accepted:
            wire.send_frame(sock, MsgType.MSG3, session.build_msg3().encode())
        return verdict
    except (FrameError, WatzError, EOFError) as exc:
        log.warning("connection closed peer=%s reason=%s detail=%s", peer,
                    type(exc).__name__, exc)
    except OSError as exc:
        log.warning("connection closed peer=%s reason=network detail=%s", peer, exc)
    return None


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.settimeout(self.server.timeout_s)
        host, port = self.client_address[:2]
        run_connection(self.server.config, self.request, f"{host}:{port}")


class VerifierServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, config: VerifierConfig, address: Optional[str] = None, timeout: float = DEFAULT_TIMEOUT):
        config.check_serving()
        self.config = config
        self.timeout_s = timeout
        super().__init__(parse_address(address or config.listen_address), _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="watz-verifier", daemon=True)
        thread.start()
        return thread


def serve(config: VerifierConfig, address: Optional[str] = None) -> None:
    """Serve until interrupted."""
    with VerifierServer(config, address) as server:
        log.info("verifier listening address=%s identity=%s", server.address,
                 config.identity.public_point.hex())
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            log.info("verifier shutting down")
