"""Guest fixtures shipped as WebAssembly text and compiled on demand."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import List

import wasmtime

NAMES = ("attest", "noop", "trap", "no_start", "oob", "hello", "probe")


def source(name: str, *, verifier_addr: str = "", verifier_key_hex: str = "", label: str = "default") -> str:
    """WAT text of a fixture; ``attest`` takes embedded verifier defaults."""
    if name not in NAMES:
        raise KeyError(f"unknown guest {name!r}")
    text = resources.files(__name__).joinpath(f"{name}.wat").read_text()
    for key, value in {
        "VERIFIER_ADDR_LEN": str(len(verifier_addr.encode())),
        "VERIFIER_ADDR": verifier_addr,
        "VERIFIER_KEY_HEX_LEN": str(len(verifier_key_hex)),
        "VERIFIER_KEY_HEX": verifier_key_hex,
        "LABEL": label,
    }.items():
        text = text.replace("{{%s}}" % key, value)
    return text


def build(name: str, **params) -> bytes:
    return bytes(wasmtime.wat2wasm(source(name, **params)))


def build_all(out_dir) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in NAMES:
        path = out / f"{name}.wasm"
        path.write_bytes(build(name))
        written.append(path)
    return written


def label_offset(module_bytes: bytes) -> int:
    """Offset of the first byte of the attest guest's label data segment.

    Flipping a byte there changes the measurement but keeps the module valid.
    """
    idx = module_bytes.find(b"watz-guest:")
    if idx < 0:
        raise ValueError("module has no watz-guest label")
    return idx


__all__ = ["NAMES", "source", "build", "build_all", "label_offset"]
