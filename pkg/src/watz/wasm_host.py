"""
Trusted-runtime stand-in: measure, instantiate and run a Wasm guest.

Guests import the remote-attestation API from module ``watz_ra``. Every
function takes and returns i32 values; the return value is an errno:

    0 ok            1 invalid handle     2 network failure
    3 protocol      4 identity mismatch  5 short buffer
    6 guest pointer out of bounds

A small slice of ``wasi_snapshot_preview1`` (args, environ, fd_write to
stdout/stderr, clocks, random, proc_exit) is provided; any other WASI
import links to a stub that traps when called.
"""

from __future__ import annotations

import enum
import logging
import os
import socket
import struct
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import wasmtime

from . import attester, crypto, wire
from .attestation_service import AttestationService
from .errors import ConfigError, FrameError, MalformedMessageError, ProtocolError, StateError, WatzError
from .evidence import Evidence
from .verifier import parse_address

log = logging.getLogger(__name__)

IMPORT_MODULE = "watz_ra"
WASI_MODULE = "wasi_snapshot_preview1"
DEFAULT_NET_TIMEOUT = 10.0
_MAX_HANDLE = 0x7FFFFFFF

_ENGINE = wasmtime.Engine()


class Errno(enum.IntEnum):
    OK = 0
    INVALID_HANDLE = 1
    NETWORK = 2
    PROTOCOL = 3
    IDENTITY = 4
    SHORT_BUFFER = 5
    BAD_POINTER = 6


@dataclass(frozen=True)
class Measurement:
    claim: bytes

    @classmethod
    def of(cls, module_bytes: bytes) -> "Measurement":
        return cls(crypto.sha256(bytes(module_bytes)))


class LoadError(WatzError):
    def __init__(self, message: str, measurement: Measurement):
        super().__init__(message)
        self.measurement = measurement


class RunError(WatzError):
    def __init__(self, cause: str, message: str):
        super().__init__(f"{cause}: {message}")
        self.cause = cause


class _BadPointer(Exception):
    pass


class _ProcExit(Exception):
    def __init__(self, code: int):
        self.code = code


class _UnsupportedWasi(Exception):
    pass


@dataclass
class AttestationContext:
    session: attester.AttesterSession
    sock: Optional[socket.socket] = None
    blob: Optional[bytes] = None

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None


@dataclass
class HostState:
    service: AttestationService
    measurement: Measurement
    contexts: Dict[int, AttestationContext] = field(default_factory=dict)
    anchors: Dict[int, bytes] = field(default_factory=dict)
    quotes: Dict[int, Evidence] = field(default_factory=dict)
    last_received_blob: Optional[bytes] = None
    last_error: Optional[str] = None
    _next_handle: int = 1

    def new_handle(self) -> int:
        handle = self._next_handle
        if handle > _MAX_HANDLE:
            raise RuntimeError("handle space exhausted")
        self._next_handle += 1
        return handle

    def close_all(self) -> None:
        for ctx in self.contexts.values():
            ctx.close()


def _u32(value: int) -> int:
    return value & 0xFFFFFFFF


class _Memory:
    """Bounds-checked view of the calling guest's exported memory."""

    def __init__(self, caller: wasmtime.Caller):
        self._caller = caller
        mem = caller.get("memory")
        self._mem = mem if isinstance(mem, wasmtime.Memory) else None

    def _check(self, ptr: int, length: int) -> int:
        ptr, length = _u32(ptr), _u32(length)
        if self._mem is None or ptr + length > self._mem.data_len(self._caller):
            raise _BadPointer()
        return ptr

    def read(self, ptr: int, length: int) -> bytes:
        start = self._check(ptr, length)
        return bytes(self._mem.read(self._caller, start, start + _u32(length)))

    def writable(self, ptr: int, length: int) -> None:
        self._check(ptr, length)

    def write(self, ptr: int, data: bytes) -> None:
        start = self._check(ptr, len(data))
        if data:
            self._mem.write(self._caller, data, start)

    def write_u32(self, ptr: int, value: int) -> None:
        self.write(ptr, struct.pack("<I", value))

    def write_u64(self, ptr: int, value: int) -> None:
        self.write(ptr, struct.pack("<Q", value))


def _i32(n: int) -> wasmtime.FuncType:
    return wasmtime.FuncType([wasmtime.ValType.i32()] * n, [wasmtime.ValType.i32()])


class GuestInstance:
    """A measured and instantiated guest module."""

    def __init__(
        self,
        module_bytes: bytes,
        service: AttestationService,
        *,
        args: Sequence[str] = (),
        stdout=None,
        net_timeout: float = DEFAULT_NET_TIMEOUT,
    ):
        # measure the exact bytes before the engine sees them
        self.measurement = Measurement.of(module_bytes)
        self.state = HostState(service=service, measurement=self.measurement)
        self.args = [b"guest"] + [a.encode() for a in args]
        self.stdout = stdout
        self.net_timeout = net_timeout
        self.store = wasmtime.Store(_ENGINE)
        try:
            self.module = wasmtime.Module(_ENGINE, bytes(module_bytes))
        except wasmtime.WasmtimeError as exc:
            raise LoadError(f"invalid module: {_first_line(exc)}", self.measurement) from None
        linker = wasmtime.Linker(_ENGINE)
        self._define_watz_ra(linker)
        self._define_wasi(linker)
        try:
            self.instance = linker.instantiate(self.store, self.module)
        except (wasmtime.WasmtimeError, wasmtime.Trap) as exc:
            raise LoadError(f"cannot instantiate module: {_first_line(exc)}", self.measurement) from None

    @property
    def claim(self) -> bytes:
        return self.measurement.claim

    def export(self, name: str):
        return self.instance.exports(self.store).get(name)

    def call(self, name: str, *args):
        func = self.export(name)
        if not isinstance(func, wasmtime.Func):
            raise RunError("missing-export", f"guest does not export function {name!r}")
        return func(self.store, *args)

    def memory(self) -> wasmtime.Memory:
        return self.export("memory")

    def read_memory(self, ptr: int, length: int) -> bytes:
        return bytes(self.memory().read(self.store, ptr, ptr + length))

    def write_memory(self, ptr: int, data: bytes) -> None:
        self.memory().write(self.store, data, ptr)

    def run(self) -> int:
        """Invoke ``_start``; returns the exit status (0 unless proc_exit says otherwise)."""
        try:
            self.call("_start")
            return 0
        except _ProcExit as exc:
            return exc.code
        except _UnsupportedWasi as exc:
            raise RunError("unsupported-wasi", str(exc)) from None
        except wasmtime.Trap as exc:
            code = exc.trap_code.name.lower() if exc.trap_code is not None else "trap"
            raise RunError("trap", f"{code}: {_first_line(exc)}") from None
        except wasmtime.WasmtimeError as exc:
            raise RunError("trap", _first_line(exc)) from None
        finally:
            self.state.close_all()

    # -- WASI-RA ---------------------------------------------------------

    def _define_watz_ra(self, linker: wasmtime.Linker) -> None:
        for name, arity, impl in (
            ("wasi_ra_net_handshake", 6, self._net_handshake),
            ("wasi_ra_collect_quote", 2, self._collect_quote),
            ("wasi_ra_dispose_quote", 1, self._dispose_quote),
            ("wasi_ra_net_send_quote", 2, self._net_send_quote),
            ("wasi_ra_net_receive_data", 4, self._net_receive_data),
            ("wasi_ra_net_dispose", 1, self._net_dispose),
            ("watz_test_sink", 2, self._test_sink),
        ):
            linker.define_func(IMPORT_MODULE, name, _i32(arity), _guarded(impl), access_caller=True)

    def _error(self, errno: Errno, reason: str) -> int:
        self.state.last_error = reason
        log.info("wasi-ra errno=%d reason=%s", errno, reason)
        return errno

    def _net_handshake(self, mem: _Memory, addr_ptr, addr_len, vkey_ptr, vkey_len, out_ctx_ptr, out_anchor_ptr):
        st = self.state
        addr_raw = mem.read(addr_ptr, addr_len)
        vkey = mem.read(vkey_ptr, vkey_len)
        mem.writable(out_ctx_ptr, 4)
        mem.writable(out_anchor_ptr, 4)
        try:
            host, port = parse_address(addr_raw.decode("utf-8"))
        except (UnicodeDecodeError, ConfigError):
            return self._error(Errno.NETWORK, "bad-address")
        try:
            session, msg0 = attester.start(vkey)
        except ConfigError:
            return self._error(Errno.PROTOCOL, "invalid-verifier-key")
        try:
            sock = socket.create_connection((host, port), timeout=self.net_timeout)
        except OSError as exc:
            return self._error(Errno.NETWORK, f"network: {exc}")
        ctx = AttestationContext(session, sock)
        try:
            wire.send_frame(sock, wire.MsgType.MSG0, msg0.encode())
            msg1 = _recv_payload(sock, wire.MsgType.MSG1)
            anchor = session.handle_msg1(msg1)
        except (OSError, EOFError, wire.TruncatedError) as exc:
            ctx.close()
            return self._error(Errno.NETWORK, f"network: {exc}")
        except (FrameError, MalformedMessageError) as exc:
            ctx.close()
            return self._error(Errno.PROTOCOL, f"malformed: {exc}")
        except ProtocolError as exc:
            # keep a failed context so the guest can still dispose of it
            ctx.close()
            handle = st.new_handle()
            st.contexts[handle] = ctx
            mem.write_u32(out_ctx_ptr, handle)
            errno = Errno.IDENTITY if exc.reason == "identity-mismatch" else Errno.PROTOCOL
            return self._error(errno, exc.reason)
        ctx_handle, anchor_handle = st.new_handle(), st.new_handle()
        st.contexts[ctx_handle] = ctx
        st.anchors[anchor_handle] = anchor
        mem.write_u32(out_ctx_ptr, ctx_handle)
        mem.write_u32(out_anchor_ptr, anchor_handle)
        return Errno.OK

    def _collect_quote(self, mem: _Memory, anchor_handle, out_quote_ptr):
        st = self.state
        anchor = st.anchors.get(anchor_handle)
        if anchor is None:
            return self._error(Errno.INVALID_HANDLE, "unknown anchor handle")
        mem.writable(out_quote_ptr, 4)
        evidence = st.service.issue_evidence(anchor, st.measurement.claim)
        handle = st.new_handle()
        st.quotes[handle] = evidence
        mem.write_u32(out_quote_ptr, handle)
        return Errno.OK

    def _dispose_quote(self, mem: _Memory, quote_handle):
        if self.state.quotes.pop(quote_handle, None) is None:
            return self._error(Errno.INVALID_HANDLE, "unknown quote handle")
        return Errno.OK

    def _net_send_quote(self, mem: _Memory, ctx_handle, quote_handle):
        st = self.state
        ctx = st.contexts.get(ctx_handle)
        evidence = st.quotes.get(quote_handle)
        if ctx is None or evidence is None:
            return self._error(Errno.INVALID_HANDLE, "unknown context or quote handle")
        if ctx.sock is None:
            return self._error(Errno.PROTOCOL, f"context is {ctx.session.phase.value}")
        try:
            msg2 = ctx.session.build_msg2(evidence)
        except StateError as exc:
            return self._error(Errno.PROTOCOL, str(exc))
        try:
            wire.send_frame(ctx.sock, wire.MsgType.MSG2, msg2.encode())
        except OSError as exc:
            ctx.close()
            return self._error(Errno.NETWORK, f"network: {exc}")
        return Errno.OK

    def _net_receive_data(self, mem: _Memory, ctx_handle, buf_ptr, buf_len, out_written_ptr):
        st = self.state
        ctx = st.contexts.get(ctx_handle)
        if ctx is None:
            return self._error(Errno.INVALID_HANDLE, "unknown context handle")
        mem.writable(out_written_ptr, 4)
        mem.writable(buf_ptr, buf_len)
        if ctx.blob is None:
            if ctx.session.phase is not attester.Phase.QUOTE_SENT or ctx.sock is None:
                return self._error(Errno.PROTOCOL, f"context is {ctx.session.phase.value}")
            try:
                msg3 = _recv_payload(ctx.sock, wire.MsgType.MSG3)
                ctx.blob = ctx.session.handle_msg3(msg3)
            except (OSError, EOFError, wire.TruncatedError) as exc:
                ctx.close()
                return self._error(Errno.NETWORK, f"network: {exc}")
            except (FrameError, MalformedMessageError) as exc:
                ctx.close()
                return self._error(Errno.PROTOCOL, f"malformed: {exc}")
            except ProtocolError as exc:
                ctx.close()
                return self._error(Errno.PROTOCOL, exc.reason)
            ctx.close()
        blob = ctx.blob
        if len(blob) > _u32(buf_len):
            mem.write_u32(out_written_ptr, len(blob))
            return Errno.SHORT_BUFFER
        mem.write(buf_ptr, blob)
        mem.write_u32(out_written_ptr, len(blob))
        return Errno.OK

    def _net_dispose(self, mem: _Memory, ctx_handle):
        ctx = self.state.contexts.pop(ctx_handle, None)
        if ctx is None:
            return self._error(Errno.INVALID_HANDLE, "unknown context handle")
        ctx.close()
        return Errno.OK

    def _test_sink(self, mem: _Memory, ptr, length):
        self.state.last_received_blob = mem.read(ptr, length)
        return Errno.OK

    # -- WASI subset -----------------------------------------------------

    def _define_wasi(self, linker: wasmtime.Linker) -> None:
        provided = {
            "args_sizes_get": self._args_sizes_get,
            "args_get": self._args_get,
            "environ_sizes_get": self._environ_sizes_get,
            "environ_get": self._environ_get,
            "fd_write": self._fd_write,
            "clock_time_get": self._clock_time_get,
            "random_get": self._random_get,
            "proc_exit": self._proc_exit,
        }
        for imp in self.module.imports:
            if imp.module != WASI_MODULE or not isinstance(imp.type, wasmtime.FuncType):
                continue
            impl = provided.get(imp.name)
            if impl is None:
                linker.define_func(WASI_MODULE, imp.name, imp.type, _unsupported(imp.name))
            else:
                linker.define_func(WASI_MODULE, imp.name, imp.type, _wasi_guarded(impl), access_caller=True)

    def _args_sizes_get(self, mem, argc_ptr, buf_size_ptr):
        mem.write_u32(argc_ptr, len(self.args))
        mem.write_u32(buf_size_ptr, sum(len(a) + 1 for a in self.args))
        return 0

    def _args_get(self, mem, argv_ptr, buf_ptr):
        offset = _u32(buf_ptr)
        for i, arg in enumerate(self.args):
            mem.write_u32(_u32(argv_ptr) + 4 * i, offset)
            mem.write(offset, arg + b"\0")
            offset += len(arg) + 1
        return 0

    def _environ_sizes_get(self, mem, count_ptr, size_ptr):
        mem.write_u32(count_ptr, 0)
        mem.write_u32(size_ptr, 0)
        return 0

    def _environ_get(self, mem, environ_ptr, buf_ptr):
        return 0

    def _fd_write(self, mem, fd, iovs_ptr, iovs_len, nwritten_ptr):
        if fd not in (1, 2):
            return 8  # WASI EBADF
        out = bytearray()
        for i in range(_u32(iovs_len)):
            base, length = struct.unpack("<II", mem.read(_u32(iovs_ptr) + 8 * i, 8))
            out += mem.read(base, length)
        stream = self.stdout if self.stdout is not None else (sys.stdout if fd == 1 else sys.stderr)
        if hasattr(stream, "buffer"):
            stream.buffer.write(out)
            stream.flush()
        else:
            stream.write(out.decode("utf-8", "replace"))
        mem.write_u32(nwritten_ptr, len(out))
        return 0

    def _clock_time_get(self, mem, clock_id, precision, out_ptr):
        now = time.monotonic_ns() if clock_id == 1 else time.time_ns()
        mem.write_u64(out_ptr, now)
        return 0

    def _random_get(self, mem, buf_ptr, buf_len):
        mem.write(buf_ptr, os.urandom(_u32(buf_len)))
        return 0

    def _proc_exit(self, mem, code):
        raise _ProcExit(_u32(code))


def _guarded(impl):
    def callback(caller, *args):
        try:
            return int(impl(_Memory(caller), *args))
        except _BadPointer:
            return Errno.BAD_POINTER.value
    return callback


def _wasi_guarded(impl):
    def callback(caller, *args):
        try:
            result = impl(_Memory(caller), *args)
        except _BadPointer:
            return 21  # WASI EFAULT
        return result
    return callback


def _unsupported(name: str):
    def callback(*args):
        raise _UnsupportedWasi(f"WASI function {name} is not supported by this runtime")
    return callback


def _recv_payload(sock, expected: wire.MsgType):
    msg_type, payload = wire.recv_frame(sock)
    if msg_type != expected:
        raise MalformedMessageError(f"expected {expected.name}, received {msg_type.name}")
    return wire.decode_payload(msg_type, payload)


def _first_line(exc: BaseException) -> str:
    text = str(exc).strip()
    return text.splitlines()[0] if text else type(exc).__name__


def load_and_measure(module_bytes: bytes, service: AttestationService, **kwargs):
    """Measure ``module_bytes`` and instantiate them; returns ``(instance, measurement)``.

    A module that fails to load raises :class:`LoadError` carrying the measurement.
    """
    instance = GuestInstance(module_bytes, service, **kwargs)
    return instance, instance.measurement


def run(instance: GuestInstance) -> int:
    return instance.run()
