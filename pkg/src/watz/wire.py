"""
Wire encoding of the four protocol messages and their TCP frame envelope.

Frame layout:
    [4 bytes  - magic "WATZ"]
    [1 byte   - message type 0..3]
    [4 bytes  - payload length (big-endian)]
    [N bytes  - payload]

Payload layouts (all offsets in bytes):
    msg0  g_a[65]
    msg1  g_v[65] | v_identity[65] | sig_V(g_v|g_a)[64] | mac[16]        = 210
    msg2  g_a[65] | ev_len[4] | evidence[ev_len] | sig_A(evidence)[64] | mac[16]
    msg3  iv[12]  | ciphertext || gcm_tag[>=16]

The MAC of msg1/msg2 covers every byte before it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import BinaryIO, Tuple

from .errors import (
    BadMagicError,
    MalformedMessageError,
    OversizeError,
    TruncatedError,
    UnknownTypeError,
)

MAGIC = b"WATZ"
HEADER = struct.Struct("!4sBI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 16 * 1024 * 1024

POINT_LEN = 65
SIG_LEN = 64
MAC_LEN = 16
IV_LEN = 12
TAG_LEN = 16
MSG1_LEN = POINT_LEN * 2 + SIG_LEN + MAC_LEN


class MsgType(IntEnum):
    MSG0 = 0
    MSG1 = 1
    MSG2 = 2
    MSG3 = 3


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if msg_type not in MsgType._value2member_map_:
        raise UnknownTypeError(f"unknown message type {msg_type}")
    if len(payload) > MAX_PAYLOAD:
        raise OversizeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, msg_type, len(payload)) + payload


def parse_header(header: bytes) -> Tuple[int, int]:
    if len(header) < HEADER_SIZE:
        raise TruncatedError("frame header truncated")
    magic, msg_type, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if msg_type not in MsgType._value2member_map_:
        raise UnknownTypeError(f"unknown message type {msg_type}")
    if length > MAX_PAYLOAD:
        raise OversizeError(f"payload length {length} exceeds {MAX_PAYLOAD}")
    return MsgType(msg_type), length


def decode_frame(data: bytes) -> Tuple[MsgType, bytes]:
    """Decode exactly one frame from the front of ``data``."""
    msg_type, length = parse_header(data)
    payload = data[HEADER_SIZE:HEADER_SIZE + length]
    if len(payload) != length:
        raise TruncatedError(f"expected {length} payload bytes, got {len(payload)}")
    return msg_type, bytes(payload)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_frame(stream: BinaryIO) -> Tuple[MsgType, bytes]:
    """Read one frame from a file-like byte stream (e.g. ``sock.makefile('rb')``)."""
    header = _read_exact(stream, HEADER_SIZE)
    if not header:
        raise EOFError("stream closed before a frame arrived")
    msg_type, length = parse_header(header)
    payload = _read_exact(stream, length)
    if len(payload) != length:
        raise TruncatedError(f"expected {length} payload bytes, got {len(payload)}")
    return msg_type, payload


def recv_frame(sock) -> Tuple[MsgType, bytes]:
    def recv_exact(n):
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                break
            buf += chunk
        return bytes(buf)

    header = recv_exact(HEADER_SIZE)
    if not header:
        raise EOFError("connection closed before a frame arrived")
    msg_type, length = parse_header(header)
    payload = recv_exact(length)
    if len(payload) != length:
        raise TruncatedError(f"expected {length} payload bytes, got {len(payload)}")
    return msg_type, payload


def send_frame(sock, msg_type: int, payload: bytes) -> None:
    sock.sendall(encode_frame(msg_type, payload))


def _check_point(name: str, value: bytes) -> None:
    if len(value) != POINT_LEN:
        raise MalformedMessageError(f"{name}: expected {POINT_LEN} bytes, got {len(value)}")
    if value[0] != 0x04:
        raise MalformedMessageError(f"{name}: not an uncompressed SEC1 point")


def _check_len(name: str, value: bytes, n: int) -> None:
    if len(value) != n:
        raise MalformedMessageError(f"{name}: expected {n} bytes, got {len(value)}")


@dataclass(frozen=True)
class Msg0Payload:
    g_a: bytes

    def encode(self) -> bytes:
        _check_point("g_a", self.g_a)
        return bytes(self.g_a)

    @classmethod
    def decode(cls, data: bytes) -> "Msg0Payload":
        _check_len("msg0", data, POINT_LEN)
        _check_point("g_a", data)
        return cls(bytes(data))


@dataclass(frozen=True)
class Msg1Payload:
    g_v: bytes
    v_identity: bytes
    signature: bytes
    mac: bytes

    @staticmethod
    def content(g_v: bytes, v_identity: bytes, signature: bytes) -> bytes:
        return g_v + v_identity + signature

    def encode(self) -> bytes:
        _check_point("g_v", self.g_v)
        _check_point("v_identity", self.v_identity)
        _check_len("signature", self.signature, SIG_LEN)
        _check_len("mac", self.mac, MAC_LEN)
        return self.content(self.g_v, self.v_identity, self.signature) + self.mac

    @property
    def mac_region(self) -> bytes:
        return self.content(self.g_v, self.v_identity, self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "Msg1Payload":
        _check_len("msg1", data, MSG1_LEN)
        g_v, v_id = data[:65], data[65:130]
        _check_point("g_v", g_v)
        _check_point("v_identity", v_id)
        return cls(bytes(g_v), bytes(v_id), bytes(data[130:194]), bytes(data[194:210]))


@dataclass(frozen=True)
class Msg2Payload:
    g_a: bytes
    evidence: bytes
    signature: bytes
    mac: bytes

    @staticmethod
    def content(g_a: bytes, evidence: bytes, signature: bytes) -> bytes:
        return g_a + struct.pack("!I", len(evidence)) + evidence + signature

    @property
    def mac_region(self) -> bytes:
        return self.content(self.g_a, self.evidence, self.signature)

    def encode(self) -> bytes:
        _check_point("g_a", self.g_a)
        _check_len("signature", self.signature, SIG_LEN)
        _check_len("mac", self.mac, MAC_LEN)
        return self.mac_region + self.mac

    @classmethod
    def decode(cls, data: bytes) -> "Msg2Payload":
        fixed = POINT_LEN + 4 + SIG_LEN + MAC_LEN
        if len(data) < fixed:
            raise MalformedMessageError(f"msg2: {len(data)} bytes is shorter than {fixed}")
        g_a = data[:POINT_LEN]
        _check_point("g_a", g_a)
        (ev_len,) = struct.unpack_from("!I", data, POINT_LEN)
        _check_len("msg2", data, fixed + ev_len)
        off = POINT_LEN + 4
        evidence = data[off:off + ev_len]
        off += ev_len
        return cls(bytes(g_a), bytes(evidence), bytes(data[off:off + SIG_LEN]),
                   bytes(data[off + SIG_LEN:]))


@dataclass(frozen=True)
class Msg3Payload:
    iv: bytes
    ciphertext: bytes

    def encode(self) -> bytes:
        _check_len("iv", self.iv, IV_LEN)
        if len(self.ciphertext) < TAG_LEN:
            raise MalformedMessageError("msg3: ciphertext shorter than the GCM tag")
        return self.iv + self.ciphertext

    @classmethod
    def decode(cls, data: bytes) -> "Msg3Payload":
        if len(data) < IV_LEN + TAG_LEN:
            raise MalformedMessageError(f"msg3: {len(data)} bytes is shorter than {IV_LEN + TAG_LEN}")
        return cls(bytes(data[:IV_LEN]), bytes(data[IV_LEN:]))


_PAYLOADS = {
    MsgType.MSG0: Msg0Payload,
    MsgType.MSG1: Msg1Payload,
    MsgType.MSG2: Msg2Payload,
    MsgType.MSG3: Msg3Payload,
}


def decode_payload(msg_type: int, data: bytes):
    return _PAYLOADS[MsgType(msg_type)].decode(data)
