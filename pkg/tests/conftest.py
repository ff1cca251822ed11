import sys
from pathlib import Path

import pytest

from watz import crypto, guests
from watz.attestation_service import AttestationService
from watz.verifier import VerifierConfig, VerifierServer

TESTS = Path(__file__).parent
sys.path.insert(0, str(TESTS))

SEED = bytes(range(32))
OTHER_SEED = bytes(range(32, 64))
IDENTITY_SCALAR = 0x5EED0F1DE7171CA7E5CA1A2000000000000000000000000000000000000000AB
SECRET = b"the provisioned secret blob \x00\x01\x02"


def load_vectors(name):
    rows = []
    for line in (TESTS / "vectors" / name).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            rows.append([b"" if f == "-" else f for f in line.split()])
    return rows


def unhex(field):
    return b"" if field == b"" else bytes.fromhex(field)


@pytest.fixture(scope="session")
def identity():
    return crypto.IdentityKeyPair.from_scalar(IDENTITY_SCALAR)


@pytest.fixture(scope="session")
def service():
    return AttestationService(SEED)


@pytest.fixture(scope="session")
def attest_wasm():
    return guests.build("attest")


@pytest.fixture(scope="session")
def probe_wasm():
    return guests.build("probe")


@pytest.fixture
def make_config(identity, service, attest_wasm):
    def make(**overrides):
        fields = dict(
            identity=identity,
            endorsements=[service.public_attestation_key()],
            reference_values=[crypto.sha256(attest_wasm)],
            min_version=1,
            secret_blob=SECRET,
            listen_address="127.0.0.1:0",
        )
        fields.update(overrides)
        return VerifierConfig(**fields)
    return make


@pytest.fixture
def start_verifier():
    """Factory: start a verifier on an ephemeral loopback port, returns the server."""
    servers = []

    def start(config, timeout=5.0):
        server = VerifierServer(config, "127.0.0.1:0", timeout=timeout)
        server.start_background()
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


# -- acceptance criterion reporting ------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    ok = report.passed if report.when == "call" else not report.failed
    prev = _CRITERIA.get(number, (title, True))
    _CRITERIA[number] = (title, prev[1] and ok and not report.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}")


# -- in-memory protocol helpers ------------------------------------------------

def handshake(config, att_keypair=None, ver_keypair=None):
    """Run msg0/msg1 without sockets; returns (attester session, verifier session)."""
    from watz import attester
    from watz.verifier import VerifierSession

    att, msg0 = attester.start(config.identity.public_point, keypair=att_keypair)
    ver = VerifierSession(config, keypair=ver_keypair)
    att.handle_msg1(ver.handle_msg0(msg0))
    return att, ver


def remac(keys, g_a, evidence_bytes, signature):
    from watz.wire import Msg2Payload

    content = Msg2Payload.content(g_a, evidence_bytes, signature)
    return Msg2Payload(g_a, evidence_bytes, signature, keys.mac(content))
