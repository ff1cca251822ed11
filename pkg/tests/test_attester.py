import os

import pytest

from conftest import SECRET, handshake
from watz import attester, crypto
from watz.attester import Phase
from watz.errors import ConfigError, ProtocolError, StateError
from watz.evidence import compute_anchor
from watz.wire import Msg1Payload, Msg3Payload


def forged_msg1(g_a, *, identity, signer=None, g_v=None, mac_key=None, corrupt_mac=False):
    """Build a msg1 for ``g_a``, with knobs to break each check independently."""
    kp = crypto.gen_session_keypair()
    g_v = g_v or kp.public_point
    signer = signer or identity
    sig = crypto.ecdsa_sign(signer, g_v + g_a)
    content = Msg1Payload.content(g_v, identity.public_point, sig)
    if mac_key is None:
        mac_key = crypto.derive_session_keys(crypto.ecdh_shared_secret(kp, g_a)).km
    mac = crypto.cmac(mac_key, content)
    if corrupt_mac:
        mac = bytes([mac[0] ^ 1]) + mac[1:]
    return Msg1Payload(g_v, identity.public_point, sig, mac)


def test_start_rejects_invalid_expected_key():
    with pytest.raises(ConfigError):
        attester.start(b"\x04" + bytes(64))


def test_start_emits_fresh_g_a(identity):
    session, msg0 = attester.start(identity.public_point)
    assert session.phase is Phase.STARTED
    assert msg0.g_a == session.g_a and crypto.is_valid_point(msg0.g_a)
    assert len({attester.start(identity.public_point)[1].g_a for _ in range(50)}) == 50


def test_full_run_phases(make_config, service, attest_wasm):
    config = make_config()
    att, ver = handshake(config)
    assert att.phase is Phase.HANDSHAKE_DONE
    assert att.anchor == compute_anchor(att.g_a, ver.g_v)
    evidence = service.issue_evidence(att.anchor, crypto.sha256(attest_wasm))
    msg2 = att.build_msg2(evidence)
    assert att.phase is Phase.QUOTE_SENT
    assert ver.appraise_msg2(msg2).accepted
    assert att.handle_msg3(ver.build_msg3()) == SECRET
    assert att.phase is Phase.COMPLETED


def test_out_of_order_calls_raise_state_error(make_config, service, identity):
    att, _ = attester.start(identity.public_point)
    with pytest.raises(StateError):
        att.build_msg2(service.issue_evidence(bytes(32), bytes(32)))
    with pytest.raises(StateError):
        att.handle_msg3(Msg3Payload(bytes(12), bytes(16)))
    att, _ = handshake(make_config())
    with pytest.raises(StateError):
        att.handle_msg1(forged_msg1(att.g_a, identity=identity))
    with pytest.raises(StateError):
        att.handle_msg3(Msg3Payload(bytes(12), bytes(16)))


def test_build_msg2_rejects_foreign_anchor(make_config, service):
    att, _ = handshake(make_config())
    with pytest.raises(StateError):
        att.build_msg2(service.issue_evidence(os.urandom(32), bytes(32)))
    assert att.phase is Phase.HANDSHAKE_DONE


def test_genuine_forged_msg1_accepted(identity):
    att, _ = attester.start(identity.public_point)
    anchor = att.handle_msg1(forged_msg1(att.g_a, identity=identity))
    assert len(anchor) == 32


@pytest.mark.parametrize(
    "reason,knobs",
    [
        ("mac-mismatch", dict(corrupt_mac=True)),
        ("mac-mismatch", dict(mac_key=bytes(16))),
        ("identity-mismatch", "other-identity"),
        ("signature-invalid", "other-signer"),
    ],
)
def test_forged_msg1_rejected(identity, reason, knobs):
    att, _ = attester.start(identity.public_point)
    other = crypto.generate_identity()
    if knobs == "other-identity":
        msg1 = forged_msg1(att.g_a, identity=other)
    elif knobs == "other-signer":
        msg1 = forged_msg1(att.g_a, identity=identity, signer=other)
    else:
        msg1 = forged_msg1(att.g_a, identity=identity, **knobs)
    with pytest.raises(ProtocolError) as exc:
        att.handle_msg1(msg1)
    assert exc.value.reason == reason
    assert att.phase is Phase.FAILED and att.failure == reason
    assert att.anchor is None


def test_signature_over_wrong_order_rejected(identity):
    att, _ = attester.start(identity.public_point)
    kp = crypto.gen_session_keypair()
    sig = crypto.ecdsa_sign(identity, att.g_a + kp.public_point)
    content = Msg1Payload.content(kp.public_point, identity.public_point, sig)
    km = crypto.derive_session_keys(crypto.ecdh_shared_secret(kp, att.g_a)).km
    with pytest.raises(ProtocolError) as exc:
        att.handle_msg1(Msg1Payload(kp.public_point, identity.public_point, sig, crypto.cmac(km, content)))
    assert exc.value.reason == "signature-invalid"


def test_off_curve_g_v_rejected(identity):
    att, _ = attester.start(identity.public_point)
    msg1 = forged_msg1(att.g_a, identity=identity)
    bad = Msg1Payload(b"\x04" + bytes(64), msg1.v_identity, msg1.signature, msg1.mac)
    with pytest.raises(ProtocolError) as exc:
        att.handle_msg1(bad)
    assert exc.value.reason == "invalid-point"


def test_mac_checked_before_identity(identity):
    # Both MAC and identity are wrong: the MAC failure is reported.
    att, _ = attester.start(identity.public_point)
    msg1 = forged_msg1(att.g_a, identity=crypto.generate_identity(), corrupt_mac=True)
    with pytest.raises(ProtocolError) as exc:
        att.handle_msg1(msg1)
    assert exc.value.reason == "mac-mismatch"


def test_tampered_msg3_is_decryption_error(make_config, service, attest_wasm):
    att, ver = handshake(make_config())
    ver.appraise_msg2(att.build_msg2(service.issue_evidence(att.anchor, crypto.sha256(attest_wasm))))
    msg3 = ver.build_msg3()
    ct = bytearray(msg3.ciphertext)
    ct[-1] ^= 1
    with pytest.raises(ProtocolError) as exc:
        att.handle_msg3(Msg3Payload(msg3.iv, bytes(ct)))
    assert exc.value.reason == "decryption-error"
    assert att.phase is Phase.FAILED


def test_sessions_use_fresh_keys(make_config):
    config = make_config()
    runs = [handshake(config) for _ in range(20)]
    assert len({a.session_keys.ke for a, _ in runs}) == 20
    assert len({a.anchor for a, _ in runs}) == 20
    for att, ver in runs:
        assert att.session_keys == ver.session_keys
