"""Per-message cost accounting used by the protocol benchmark.

The state machines wrap their work in ``recorder.span(message, category)``;
the recorder sums elapsed nanoseconds per (message, category) cell.
"""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager, nullcontext

MEMORY = "memory management"
KEYGEN = "key generation"
SYMMETRIC = "symmetric cryptography"
ASYMMETRIC = "asymmetric cryptography"
CATEGORIES = (MEMORY, KEYGEN, SYMMETRIC, ASYMMETRIC)

_NULL = nullcontext()


class NullRecorder:
    def span(self, message: str, category: str):
        return _NULL


class SpanRecorder:
    def __init__(self):
        self.totals = defaultdict(int)

    @contextmanager
    def span(self, message: str, category: str):
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            self.totals[(message, category)] += time.perf_counter_ns() - start

    def reset(self) -> None:
        self.totals.clear()


NULL_RECORDER = NullRecorder()
