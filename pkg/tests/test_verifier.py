import itertools
import json
import logging
import os
import socket
import threading

import pytest

from conftest import OTHER_SEED, SECRET, SEED, handshake, remac
from watz import attester, crypto, verifier, wire
from watz.attestation_service import AttestationService
from watz.errors import ConfigError, InvalidPointError, StateError
from watz.evidence import serialize_evidence
from watz.verifier import REASONS, Phase, VerifierSession, load_config
from watz.wire import Msg0Payload, Msg2Payload, MsgType

CLAIM = crypto.sha256(b"reference guest")


def faulty_msg2(att, ver, faults):
    """msg2 for an established session with the named faults injected."""
    seed = OTHER_SEED if "unendorsed-device" in faults else SEED
    version = 0 if "stale-version" in faults else 1
    svc = AttestationService(seed, version=version)
    anchor = os.urandom(32) if "anchor-mismatch" in faults else att.anchor
    claim = os.urandom(32) if "unknown-claim" in faults else CLAIM
    ev = svc.issue_evidence(anchor, claim)
    data = bytearray(serialize_evidence(ev))
    if "bad-evidence-signature" in faults:
        data[-1] ^= 0x01
    sig = bytes(data[133:])
    g_a = crypto.gen_session_keypair().public_point if "ga-mismatch" in faults else att.g_a
    msg2 = remac(att.session_keys, g_a, bytes(data), sig)
    if "mac-mismatch" in faults:
        msg2 = Msg2Payload(msg2.g_a, msg2.evidence, msg2.signature, bytes(16))
    return msg2


@pytest.fixture
def config(make_config, service):
    return make_config(reference_values=[CLAIM])


def test_genuine_msg2_accepted(config):
    att, ver = handshake(config)
    verdict = ver.appraise_msg2(faulty_msg2(att, ver, ()))
    assert verdict.accepted and verdict.reason is None and verdict.claim == CLAIM
    assert ver.phase is Phase.ACCEPTED


@pytest.mark.parametrize("reason", REASONS)
def test_single_fault(config, reason):
    att, ver = handshake(config)
    verdict = ver.appraise_msg2(faulty_msg2(att, ver, (reason,)))
    assert (verdict.outcome, verdict.reason) == ("rejected", reason)
    assert ver.phase is Phase.FAILED
    with pytest.raises(StateError):
        ver.build_msg3()


@pytest.mark.parametrize("pair", list(itertools.combinations(REASONS, 2)), ids="+".join)
def test_pairwise_faults_report_earliest_check(config, pair):
    att, ver = handshake(config)
    assert ver.appraise_msg2(faulty_msg2(att, ver, pair)).reason == pair[0]


def test_all_faults_report_mac(config):
    att, ver = handshake(config)
    assert ver.appraise_msg2(faulty_msg2(att, ver, REASONS)).reason == "mac-mismatch"


@pytest.mark.parametrize("endorsed", [True, False])
@pytest.mark.parametrize("known", [True, False])
def test_endorsement_reference_matrix(make_config, service, endorsed, known):
    other = AttestationService(OTHER_SEED).public_attestation_key()
    config = make_config(
        endorsements=[service.public_attestation_key() if endorsed else other],
        reference_values=[CLAIM if known else os.urandom(32)],
    )
    att, ver = handshake(config)
    verdict = ver.appraise_msg2(faulty_msg2(att, ver, ()))
    expected = None if endorsed and known else ("unendorsed-device" if not endorsed else "unknown-claim")
    assert verdict.reason == expected
    assert verdict.accepted is (expected is None)


def test_min_version_boundary(make_config):
    config = make_config(reference_values=[CLAIM], min_version=2)
    att, ver = handshake(config)
    ev = AttestationService(SEED, version=2).issue_evidence(att.anchor, CLAIM)
    assert ver.appraise_msg2(att.build_msg2(ev)).accepted


def test_msg2_signature_must_equal_evidence_signature(config, service):
    att, ver = handshake(config)
    ev_bytes = serialize_evidence(service.issue_evidence(att.anchor, CLAIM))
    msg2 = remac(att.session_keys, att.g_a, ev_bytes, os.urandom(64))
    assert ver.appraise_msg2(msg2).reason == "bad-evidence-signature"


def test_truncated_evidence_under_valid_mac(config, service):
    att, ver = handshake(config)
    ev_bytes = serialize_evidence(service.issue_evidence(att.anchor, CLAIM))
    msg2 = remac(att.session_keys, att.g_a, ev_bytes[:196], ev_bytes[133:])
    assert ver.appraise_msg2(msg2).reason == "malformed-evidence"


def test_replayed_msg2_into_fresh_session(config, service):
    # A recorded msg2 replayed byte for byte fails the MAC under new keys. A host
    # that reuses its session key and re-MACs the old evidence hits the anchor check.
    att_kp = crypto.gen_session_keypair()
    att, ver = handshake(config, att_keypair=att_kp)
    old = att.build_msg2(service.issue_evidence(att.anchor, CLAIM))
    assert ver.appraise_msg2(old).accepted

    att2, ver2 = handshake(config, att_keypair=att_kp)
    assert ver2.appraise_msg2(old).reason == "mac-mismatch"

    att3, ver3 = handshake(config, att_keypair=att_kp)
    replay = remac(att3.session_keys, old.g_a, old.evidence, old.signature)
    assert ver3.appraise_msg2(replay).reason == "anchor-mismatch"


def test_off_curve_msg0_rejected(config):
    ver = VerifierSession(config)
    with pytest.raises(InvalidPointError):
        ver.handle_msg0(Msg0Payload(b"\x04" + bytes(64)))
    assert ver.phase is Phase.FAILED


def test_duplicate_msg0_is_state_error(config):
    ver = VerifierSession(config)
    msg0 = Msg0Payload(crypto.gen_session_keypair().public_point)
    ver.handle_msg0(msg0)
    with pytest.raises(StateError):
        ver.handle_msg0(msg0)


def test_msg1_signature_covers_both_points(config, identity):
    msg0 = Msg0Payload(crypto.gen_session_keypair().public_point)
    _, msg1 = verifier.handle_msg0(config, msg0)
    assert msg1.v_identity == identity.public_point
    assert crypto.ecdsa_verify(identity.public_point, msg1.g_v + msg0.g_a, msg1.signature)


def test_msg3_fresh_iv_and_decrypts(config):
    ivs = set()
    for _ in range(10):
        att, ver = handshake(config)
        ver.appraise_msg2(faulty_msg2(att, ver, ()))
        msg3 = verifier.build_msg3(ver)
        ivs.add(msg3.iv)
        assert len(msg3.ciphertext) == len(SECRET) + 16
        assert crypto.aead_decrypt(att.session_keys.ke, msg3.iv, msg3.ciphertext) == SECRET
        assert ver.phase is Phase.PROVISIONED
        with pytest.raises(StateError):
            ver.build_msg3()
    assert len(ivs) == 10


# -- configuration -------------------------------------------------------------

def test_config_validation(make_config):
    with pytest.raises(ConfigError):
        make_config(endorsements=[b"\x04" + bytes(64)])
    with pytest.raises(ConfigError):
        make_config(reference_values=[bytes(31)])
    with pytest.raises(ConfigError):
        make_config(min_version=-1)
    with pytest.raises(ConfigError):
        make_config(endorsements=[]).check_serving()
    with pytest.raises(ConfigError):
        make_config(reference_values=[]).check_serving()


def write_config(tmp_path, **overrides):
    (tmp_path / "secret.bin").write_bytes(SECRET)
    raw = dict(
        identity_private_key="%064x" % 12345,
        endorsements=[AttestationService(SEED).public_attestation_key().hex()],
        reference_values=[CLAIM.hex()],
        min_version=3,
        secret_blob_file="secret.bin",
        listen_address="127.0.0.1:0",
    )
    raw.update(overrides)
    path = tmp_path / "verifier.json"
    path.write_text(json.dumps({k: v for k, v in raw.items() if v is not None}))
    return path


def test_load_config(tmp_path):
    config = load_config(write_config(tmp_path))
    assert config.identity.private_scalar == 12345
    assert config.min_version == 3
    assert config.secret_blob == SECRET
    assert config.reference_values == {CLAIM}


@pytest.mark.parametrize(
    "overrides",
    [
        dict(identity_private_key="00" * 32),
        dict(identity_private_key="xyz"),
        dict(endorsements="not a list"),
        dict(endorsements=["zz"]),
        dict(reference_values=["00" * 31]),
        dict(secret_blob_file="missing.bin"),
        dict(identity_private_key=None),
    ],
)
def test_load_config_errors(tmp_path, overrides):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, **overrides))


def test_load_config_missing_or_bad_json(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_parse_address():
    assert verifier.parse_address("127.0.0.1:7000") == ("127.0.0.1", 7000)
    assert verifier.parse_address("[::1]:80") == ("::1", 80)
    with pytest.raises(ConfigError):
        verifier.parse_address("localhost")


# -- network listener ----------------------------------------------------------

def connect(server):
    host, port = verifier.parse_address(server.address)
    return socket.create_connection((host, port), timeout=5)


def socket_run(server, config, service, claim=CLAIM):
    with connect(server) as sock:
        att, msg0 = attester.start(config.identity.public_point)
        wire.send_frame(sock, MsgType.MSG0, msg0.encode())
        _, payload = wire.recv_frame(sock)
        att.handle_msg1(wire.Msg1Payload.decode(payload))
        msg2 = att.build_msg2(service.issue_evidence(att.anchor, claim))
        wire.send_frame(sock, MsgType.MSG2, msg2.encode())
        try:
            msg_type, payload = wire.recv_frame(sock)
        except EOFError:
            return None
        assert msg_type == MsgType.MSG3
        return att.handle_msg3(wire.Msg3Payload.decode(payload))


def test_server_provisions_secret(config, service, start_verifier, caplog):
    caplog.set_level(logging.INFO, logger="watz.verifier")
    server = start_verifier(config)
    assert socket_run(server, config, service) == SECRET
    assert f"outcome=accepted reason=- claim={CLAIM.hex()}" in caplog.text


def test_server_rejection_closes_without_msg3(config, service, start_verifier, caplog):
    caplog.set_level(logging.INFO, logger="watz.verifier")
    server = start_verifier(config)
    assert socket_run(server, config, service, claim=os.urandom(32)) is None
    assert "outcome=rejected reason=unknown-claim" in caplog.text


def test_server_survives_garbage(config, service, start_verifier):
    server = start_verifier(config)
    with connect(server) as sock:
        sock.sendall(b"GARBAGE!" * 4)
        assert sock.recv(100) == b""
    with connect(server) as sock:
        sock.sendall(wire.encode_frame(MsgType.MSG2, b"\x00" * 10))
        assert sock.recv(100) == b""
    with connect(server) as sock:
        pass
    assert socket_run(server, config, service) == SECRET


def test_server_timeout_on_silent_client(config, service, start_verifier):
    server = start_verifier(config, timeout=0.3)
    with connect(server) as sock:
        sock.settimeout(3)
        assert sock.recv(100) == b""
    assert socket_run(server, config, service) == SECRET


def test_concurrent_clients(config, service, start_verifier):
    server = start_verifier(config)
    results, errors = [], []

    def client():
        try:
            results.append(socket_run(server, config, service))
        except Exception as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=client) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(20)
    assert not errors
    assert results == [SECRET] * 8
