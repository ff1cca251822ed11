"""Loopback micro-benchmark of the attestation protocol.

Runs complete protocol exchanges in-process (frames are encoded and decoded
but not sent over a socket) and reports, per party, the cost of generating
or handling msg0..msg2 split into four categories, plus msg3 cost against
secret size.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from . import attester, crypto, wire
from .attestation_service import AttestationService
from .timing import ASYMMETRIC, CATEGORIES, MEMORY, NULL_RECORDER, SYMMETRIC, SpanRecorder
from .verifier import VerifierConfig, VerifierSession
from .wire import Msg0Payload, Msg1Payload, Msg2Payload, Msg3Payload, MsgType

PARTIES = ("attester", "verifier")
MESSAGES = ("msg0", "msg1", "msg2")
MiB = 1024 * 1024
MSG3_SIZES = (MiB // 2, MiB, 2 * MiB, 3 * MiB)
BENCH_CLAIM = crypto.sha256(b"watz-bench-guest")

# generation (+) or handling (-) of each message, per party
ROLE = {
    ("attester", "msg0"): "generate", ("attester", "msg1"): "handle", ("attester", "msg2"): "generate",
    ("verifier", "msg0"): "handle", ("verifier", "msg1"): "generate", ("verifier", "msg2"): "handle",
}


@dataclass
class Cell:
    samples: List[float] = field(default_factory=list)  # microseconds
    recorded: bool = False

    @property
    def median(self) -> float:
        return statistics.median(self.samples) if self.samples else 0.0

    @property
    def stdev(self) -> float:
        return statistics.stdev(self.samples) if len(self.samples) > 1 else 0.0


@dataclass
class BenchResult:
    iterations: int
    grid: Dict[Tuple[str, str, str], Cell]
    msg3: Dict[Tuple[str, int], Cell]
    blob_sizes: Tuple[int, ...]

    def cell(self, party: str, message: str, category: str) -> Cell:
        return self.grid[(party, message, category)]

    def asymmetric_ratio(self, party: str) -> float:
        """Median asymmetric over median symmetric cost, msg1 and msg2 combined."""
        asym = sum(self.cell(party, m, ASYMMETRIC).median for m in ("msg1", "msg2"))
        sym = sum(self.cell(party, m, SYMMETRIC).median for m in ("msg1", "msg2"))
        return asym / sym if sym else float("inf")

    def dominant_category(self, party: str) -> str:
        totals = {c: sum(self.cell(party, m, c).median for m in ("msg1", "msg2")) for c in CATEGORIES}
        return max(totals, key=totals.get)


def _setup(seed: bytes, secret: bytes):
    service = AttestationService(seed)
    identity = crypto.IdentityKeyPair.from_scalar(
        int.from_bytes(crypto.sha256(b"watz-bench-identity"), "big") % (crypto.P256_ORDER - 1) + 1
    )
    config = VerifierConfig(
        identity=identity,
        endorsements=[service.public_attestation_key()],
        reference_values=[BENCH_CLAIM],
        secret_blob=secret,
    )
    return service, config


def run_exchange(service, config, att_rec=NULL_RECORDER, ver_rec=NULL_RECORDER):
    """One msg0..msg2 exchange; returns the accepted (attester, verifier) sessions."""
    session, msg0 = attester.start(config.identity.public_point, recorder=att_rec)
    with att_rec.span("msg0", MEMORY):
        frame0 = wire.encode_frame(MsgType.MSG0, msg0.encode())

    with ver_rec.span("msg0", MEMORY):
        _, payload = wire.decode_frame(frame0)
        vmsg0 = Msg0Payload.decode(payload)
    vsession = VerifierSession(config, recorder=ver_rec)
    msg1 = vsession.handle_msg0(vmsg0)
    with ver_rec.span("msg1", MEMORY):
        frame1 = wire.encode_frame(MsgType.MSG1, msg1.encode())

    with att_rec.span("msg1", MEMORY):
        _, payload = wire.decode_frame(frame1)
        amsg1 = Msg1Payload.decode(payload)
    anchor = session.handle_msg1(amsg1)
    with att_rec.span("msg2", ASYMMETRIC):
        evidence = service.issue_evidence(anchor, BENCH_CLAIM)
    msg2 = session.build_msg2(evidence)
    with att_rec.span("msg2", MEMORY):
        frame2 = wire.encode_frame(MsgType.MSG2, msg2.encode())

    with ver_rec.span("msg2", MEMORY):
        _, payload = wire.decode_frame(frame2)
        vmsg2 = Msg2Payload.decode(payload)
    verdict = vsession.appraise_msg2(vmsg2)
    if not verdict.accepted:
        raise RuntimeError(f"benchmark exchange rejected: {verdict.reason}")
    return session, vsession


def _time_msg3(session, vsession, att_rec, ver_rec) -> bytes:
    msg3 = vsession.build_msg3()
    with ver_rec.span("msg3", MEMORY):
        frame3 = wire.encode_frame(MsgType.MSG3, msg3.encode())
    with att_rec.span("msg3", MEMORY):
        _, payload = wire.decode_frame(frame3)
        amsg3 = Msg3Payload.decode(payload)
    return session.handle_msg3(amsg3)


def run_bench(iterations: int, blob_sizes: Sequence[int] = MSG3_SIZES, seed: bytes = bytes(32)) -> BenchResult:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    grid = {(p, m, c): Cell() for p in PARTIES for m in MESSAGES for c in CATEGORIES}
    service, config = _setup(seed, b"")
    run_exchange(service, config)  # warm-up
    for _ in range(iterations):
        recs = {"attester": SpanRecorder(), "verifier": SpanRecorder()}
        run_exchange(service, config, recs["attester"], recs["verifier"])
        for (party, message, category), cell in grid.items():
            key = (message, category)
            if key in recs[party].totals:
                cell.recorded = True
            cell.samples.append(recs[party].totals.get(key, 0) / 1000.0)

    msg3 = {}
    for size in blob_sizes:
        service, config = _setup(seed, bytes(size))
        cells = {p: Cell(recorded=True) for p in PARTIES}
        for _ in range(iterations):
            session, vsession = run_exchange(service, config)
            recs = {"attester": SpanRecorder(), "verifier": SpanRecorder()}
            _time_msg3(session, vsession, recs["attester"], recs["verifier"])
            for party in PARTIES:
                cells[party].samples.append(sum(recs[party].totals.values()) / 1000.0)
        for party in PARTIES:
            msg3[(party, size)] = cells[party]
    return BenchResult(iterations, grid, msg3, tuple(blob_sizes))


def _fmt_us(value: float) -> str:
    if value >= 1000:
        return f"{value / 1000:.2f} ms"
    return f"{value:.1f} us"


def _fmt_cell(cell: Cell) -> str:
    if not cell.recorded:
        return "---"
    return f"{_fmt_us(cell.median)} ± {_fmt_us(cell.stdev)}"


def format_table(result: BenchResult) -> str:
    lines = [f"protocol cost per message (median ± stdev, {result.iterations} iterations)", ""]
    width = max(len(c) for c in CATEGORIES) + 2
    for label, party in (("(a) attester", "attester"), ("(b) verifier", "verifier")):
        heads = [f"{'+' if ROLE[(party, m)] == 'generate' else '-'}{m}" for m in MESSAGES]
        rows = [[_fmt_cell(result.cell(party, m, c)) for m in MESSAGES] for c in CATEGORIES]
        colw = max(24, *(len(x) for r in rows for x in r)) + 2
        lines.append(label.ljust(width) + "".join(h.rjust(colw) for h in heads))
        for cat, row in zip(CATEGORIES, rows):
            lines.append(cat.ljust(width) + "".join(x.rjust(colw) for x in row))
        lines.append("")
    lines.append("+ generation of the message   - handling of the message")
    lines.append("")
    lines.append("msg3 cost by secret size (median ± stdev)")
    lines.append("size".ljust(12) + "verifier (encrypt)".rjust(26) + "attester (decrypt)".rjust(26))
    for size in result.blob_sizes:
        lines.append(
            f"{size / MiB:g} MiB".ljust(12)
            + _fmt_cell(result.msg3[("verifier", size)]).rjust(26)
            + _fmt_cell(result.msg3[("attester", size)]).rjust(26)
        )
    return "\n".join(lines)


def write_csv(result: BenchResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "party", "message", "category", "blob_size", "median_us", "stdev_us", "samples"])
        for (party, message, category), cell in result.grid.items():
            if not cell.recorded:
                writer.writerow(["message", party, message, category, "", "", "", 0])
                continue
            writer.writerow(["message", party, message, category, "",
                             f"{cell.median:.3f}", f"{cell.stdev:.3f}", len(cell.samples)])
        for (party, size), cell in result.msg3.items():
            writer.writerow(["msg3", party, "msg3", "total", size,
                             f"{cell.median:.3f}", f"{cell.stdev:.3f}", len(cell.samples)])
