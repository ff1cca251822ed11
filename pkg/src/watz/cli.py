"""Command-line entry point: ``watz <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import bench, crypto, guests
from .attestation_service import AttestationService, load_seed
from .errors import ConfigError, WatzError
from .evidence import Evidence
from .verifier import VerifierServer, load_config
from .wasm_host import GuestInstance, LoadError, Measurement, RunError

log = logging.getLogger("watz")


class CommandError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CommandError("io", f"cannot read {path}: {exc.strerror}") from None


def cmd_verifier_serve(args) -> int:
    config = load_config(args.config)
    server = VerifierServer(config, args.listen)
    log.info("verifier listening address=%s identity=%s", server.address, config.identity.public_point.hex())
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        log.info("verifier shutting down")
    finally:
        server.server_close()
    return 0


def cmd_attester_run(args) -> int:
    try:
        vkey = bytes.fromhex(args.verifier_key)
    except ValueError:
        raise CommandError("config", "--verifier-key is not hex") from None
    if not crypto.is_valid_point(vkey):
        raise CommandError("config", "--verifier-key is not a P-256 SEC1 point")
    service = AttestationService(load_seed(args.seed_file), args.version)
    module = _read_file(args.module)
    try:
        instance = GuestInstance(module, service, args=[args.verifier, args.verifier_key],
                                 net_timeout=args.timeout)
    except LoadError as exc:
        raise CommandError("load", f"{exc} (claim {exc.measurement.claim.hex()})") from None
    log.info("measured module claim=%s", instance.claim.hex())
    try:
        status = instance.run()
    except RunError as exc:
        raise CommandError("run", str(exc)) from None
    blob = instance.state.last_received_blob
    if status != 0 or blob is None:
        reason = instance.state.last_error or "guest did not deliver a secret"
        raise CommandError("attestation-failed", f"{reason} (guest exit {status})")
    if args.out:
        Path(args.out).write_bytes(blob)
        log.info("secret written path=%s bytes=%d", args.out, len(blob))
    else:
        print(blob.hex())
    return 0


def cmd_measure(args) -> int:
    print(Measurement.of(_read_file(args.module)).claim.hex())
    return 0


def cmd_keygen(args) -> int:
    print(AttestationService(load_seed(args.seed_file)).public_attestation_key().hex())
    return 0


def cmd_identity_gen(args) -> int:
    identity = crypto.generate_identity()
    out = Path(args.out)
    fd = os.open(out, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(identity.private_bytes().hex() + "\n")
    print(identity.public_point.hex())
    return 0


def cmd_inspect(args) -> int:
    text = args.evidence
    if text == "-":
        text = sys.stdin.read()
    elif os.path.exists(text):
        text = Path(text).read_text()
    print(json.dumps(Evidence.from_hex(text).describe(), indent=2))
    return 0


def cmd_build_guests(args) -> int:
    for path in guests.build_all(args.out):
        print(path)
    return 0


def cmd_bench(args) -> int:
    sizes = (args.blob_size,) if args.blob_size is not None else bench.MSG3_SIZES
    result = bench.run_bench(args.iterations, sizes)
    print(bench.format_table(result))
    if args.csv:
        bench.write_csv(result, args.csv)
    if args.plot_dir:
        from .plotting import render_report

        for path in render_report(result, args.plot_dir):
            log.info("figure written path=%s", path)
    return 0


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="watz", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ver = sub.add_parser("verifier", help="verifier service").add_subparsers(dest="action", required=True)
    p = ver.add_parser("serve", help="run the verifier")
    p.add_argument("--config", required=True)
    p.add_argument("--listen", help="override listen_address (host:port)")
    p.set_defaults(func=cmd_verifier_serve)

    att = sub.add_parser("attester", help="attester runtime").add_subparsers(dest="action", required=True)
    p = att.add_parser("run", help="measure and run a guest module")
    p.add_argument("--module", required=True)
    p.add_argument("--verifier", required=True, metavar="HOST:PORT")
    p.add_argument("--verifier-key", required=True, metavar="HEX")
    p.add_argument("--seed-file", help="64-hex root-of-trust seed (default: $WATZ_ROOT_SEED)")
    p.add_argument("--version", type=int, default=1, help="runtime version reported in evidence")
    p.add_argument("--out", help="write the secret here instead of printing hex")
    p.add_argument("--timeout", type=float, default=10.0, help="network timeout in seconds")
    p.set_defaults(func=cmd_attester_run)

    p = sub.add_parser("measure", help="print the claim (SHA-256) of a module")
    p.add_argument("module")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("keygen", help="print the attestation public key for a seed")
    p.add_argument("--seed-file")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("identity-gen", help="create a fresh verifier identity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_identity_gen)

    p = sub.add_parser("inspect", help="decode hex evidence (argument, file, or - for stdin)")
    p.add_argument("evidence")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("build-guests", help="compile the bundled guest fixtures")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_guests)

    p = sub.add_parser("bench", help="protocol micro-benchmark")
    p.add_argument("--iterations", type=_positive_int, default=20)
    p.add_argument("--blob-size", type=_positive_int, help="single msg3 secret size in bytes")
    p.add_argument("--csv", help="also write the table as CSV")
    p.add_argument("--plot-dir", help="render figures into this directory")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
    except WatzError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error: os: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
