"""Explicit accounting of the numeric buffers a reconstruction keeps alive.

Stages call :func:`track` at every major allocation. When no ledger is
active the call is a no-op, so library code pays nothing outside audits.
Entries keep the largest size ever registered under a name, so a buffer
reused across iterations is counted once.
"""
from __future__ import annotations

import contextlib
import contextvars
import threading
from dataclasses import dataclass

import numpy as np

_ACTIVE: contextvars.ContextVar["MemoryLedger | None"] = contextvars.ContextVar(
    "qfnlos_ledger", default=None
)


@dataclass
class LedgerEntry:
    name: str
    elements: int
    bytes: int


class MemoryLedger:
    def __init__(self):
        self._entries: dict[str, LedgerEntry] = {}
        self._lock = threading.Lock()

    def register(self, name: str, elements: int, itemsize: int) -> None:
        elements = int(elements)
        nbytes = elements * int(itemsize)
        with self._lock:
            old = self._entries.get(name)
            if old is None or nbytes > old.bytes:
                self._entries[name] = LedgerEntry(name, elements, nbytes)

    def register_array(self, name: str, arr: np.ndarray) -> None:
        self.register(name, arr.size, arr.itemsize)

    @property
    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries.values())

    @property
    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.entries)

    def max_entry(self) -> LedgerEntry | None:
        entries = self.entries
        return max(entries, key=lambda e: e.bytes) if entries else None

    def max_elements(self) -> int:
        return max((e.elements for e in self.entries), default=0)

    def __getitem__(self, name: str) -> LedgerEntry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    @contextlib.contextmanager
    def active(self):
        token = _ACTIVE.set(self)
        try:
            yield self
        finally:
            _ACTIVE.reset(token)

    def summary(self) -> str:
        lines = [f"{'buffer':<28}{'elements':>12}{'bytes':>14}"]
        for e in sorted(self.entries, key=lambda e: -e.bytes):
            lines.append(f"{e.name:<28}{e.elements:>12}{e.bytes:>14}")
        total = self.total_bytes
        lines.append(f"{'total':<28}{'':>12}{total:>14}  ({total / 2**20:.3f} MiB)")
        return "\n".join(lines)


def current_ledger() -> MemoryLedger | None:
    return _ACTIVE.get()


def track(name: str, arr_or_elements, itemsize: int | None = None) -> None:
    ledger = _ACTIVE.get()
    if ledger is None:
        return
    if isinstance(arr_or_elements, np.ndarray):
        ledger.register_array(name, arr_or_elements)
    else:
        ledger.register(name, arr_or_elements, itemsize)
