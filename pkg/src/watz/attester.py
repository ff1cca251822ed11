"""Attester side of the four-message attestation protocol."""

from __future__ import annotations

import enum
import logging
from typing import Optional

from . import crypto
from .errors import ConfigError, InvalidPointError, ProtocolError, StateError
from .evidence import Evidence, compute_anchor, serialize_evidence
from .timing import ASYMMETRIC, KEYGEN, MEMORY, NULL_RECORDER, SYMMETRIC
from .wire import Msg0Payload, Msg1Payload, Msg2Payload, Msg3Payload

log = logging.getLogger(__name__)


class Phase(enum.Enum):
    STARTED = "started"
    HANDSHAKE_DONE = "handshake-done"
    QUOTE_SENT = "quote-sent"
    COMPLETED = "completed"
    FAILED = "failed"


class AttesterSession:
    """One protocol run. Not safe for concurrent use; sessions are independent."""

    def __init__(self, expected_verifier_key: bytes, keypair: crypto.SessionKeyPair, recorder=None):
        self.phase = Phase.STARTED
        self.session_keypair = keypair
        self.expected_verifier_key = bytes(expected_verifier_key)
        self.peer_g_v: Optional[bytes] = None
        self.session_keys: Optional[crypto.SessionKeys] = None
        self.anchor: Optional[bytes] = None
        self.failure: Optional[str] = None
        self._rec = recorder or NULL_RECORDER

    def __repr__(self):
        return f"<AttesterSession phase={self.phase.value} g_a={self.g_a.hex()[:16]}...>"

    @property
    def g_a(self) -> bytes:
        return self.session_keypair.public_point

    def _expect(self, phase: Phase) -> None:
        if self.phase is not phase:
            raise StateError(f"attester session is {self.phase.value}, expected {phase.value}")

    def _fail(self, reason: str, detail: str = "") -> ProtocolError:
        self.phase = Phase.FAILED
        self.failure = reason
        log.info("attester session failed reason=%s", reason)
        return ProtocolError(reason, detail)

    def handle_msg1(self, msg1: Msg1Payload) -> bytes:
        """Authenticate the verifier's reply; returns the session anchor."""
        self._expect(Phase.STARTED)
        rec = self._rec
        with rec.span("msg1", KEYGEN):
            try:
                shared = crypto.ecdh_shared_secret(self.session_keypair, msg1.g_v)
            except InvalidPointError as exc:
                raise self._fail("invalid-point", str(exc)) from None
            keys = crypto.derive_session_keys(shared)
        with rec.span("msg1", MEMORY):
            content = msg1.mac_region
        with rec.span("msg1", SYMMETRIC):
            mac_ok = crypto.mac_equal(keys.mac(content), msg1.mac)
        if not mac_ok:
            raise self._fail("mac-mismatch", "msg1 MAC does not verify under Km")
        with rec.span("msg1", MEMORY):
            identity_ok = msg1.v_identity == self.expected_verifier_key
        if not identity_ok:
            raise self._fail("identity-mismatch", "verifier identity differs from the expected key")
        with rec.span("msg1", ASYMMETRIC):
            sig_ok = crypto.ecdsa_verify(msg1.v_identity, msg1.g_v + self.g_a, msg1.signature)
        if not sig_ok:
            raise self._fail("signature-invalid", "signature over (G_v || G_a) does not verify")
        with rec.span("msg1", SYMMETRIC):
            anchor = compute_anchor(self.g_a, msg1.g_v)
        with rec.span("msg1", MEMORY):
            self.peer_g_v = msg1.g_v
            self.session_keys = keys
            self.anchor = anchor
            self.phase = Phase.HANDSHAKE_DONE
        return self.anchor

    def build_msg2(self, evidence: Evidence) -> Msg2Payload:
        self._expect(Phase.HANDSHAKE_DONE)
        if evidence.anchor != self.anchor:
            raise StateError("evidence anchor does not belong to this session")
        rec = self._rec
        with rec.span("msg2", MEMORY):
            ev_bytes = serialize_evidence(evidence)
            content = Msg2Payload.content(self.g_a, ev_bytes, evidence.signature)
        with rec.span("msg2", SYMMETRIC):
            mac = self.session_keys.mac(content)
        with rec.span("msg2", MEMORY):
            msg2 = Msg2Payload(self.g_a, ev_bytes, evidence.signature, mac)
        self.phase = Phase.QUOTE_SENT
        return msg2

    def handle_msg3(self, msg3: Msg3Payload) -> bytes:
        self._expect(Phase.QUOTE_SENT)
        with self._rec.span("msg3", SYMMETRIC):
            try:
                blob = crypto.aead_decrypt(self.session_keys.ke, msg3.iv, msg3.ciphertext)
            except Exception as exc:
                raise self._fail("decryption-error", str(exc)) from None
        self.phase = Phase.COMPLETED
        return blob


def start(
    expected_verifier_key: bytes,
    *,
    keypair: Optional[crypto.SessionKeyPair] = None,
    entropy_source=None,
    recorder=None,
):
    """Open a session; returns ``(session, msg0)``."""
    if not crypto.is_valid_point(expected_verifier_key):
        raise ConfigError("expected verifier key is not a valid P-256 SEC1 point")
    rec = recorder or NULL_RECORDER
    if keypair is None:
        with rec.span("msg0", KEYGEN):
            keypair = crypto.gen_session_keypair(entropy_source)
    session = AttesterSession(expected_verifier_key, keypair, rec)
    with rec.span("msg0", MEMORY):
        msg0 = Msg0Payload(keypair.public_point)
    return session, msg0
