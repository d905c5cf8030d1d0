"""Logical-byte memory ledger and wall-clock phase timer.

The ledger counts bytes of tensors the package holds on to (tape entries,
parameters, gradients, prepared batches). It does not look at process RSS,
so every number it reports is deterministic for a given run.
"""

from __future__ import annotations

import csv
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

ACTIVATIONS = "activations"
WEIGHTS = "weights"
MASTER_WEIGHTS = "master_weights"
GRADIENTS = "gradients"
ENCODED_BATCHES = "encoded_batches"
CATEGORIES = (ACTIVATIONS, WEIGHTS, MASTER_WEIGHTS, GRADIENTS, ENCODED_BATCHES)


class AccountingError(RuntimeError):
    """Raised when instrumentation frees more than it allocated."""


@dataclass(frozen=True)
class LedgerEvent:
    ts_ns: int
    category: str
    delta: int
    label: str
    total: int


class MemoryLedger:
    """Running and peak byte counts per category, with an event log.

    All mutation goes through one lock so the pipeline producer can report
    hand-offs from its own thread.
    """

    def __init__(self, keep_events: bool = True):
        self.current = {c: 0 for c in CATEGORIES}
        self.peak = {c: 0 for c in CATEGORIES}
        self.total = 0
        self.peak_total = 0
        self.keep_events = keep_events
        self.events: list[LedgerEvent] = []
        self._lock = threading.Lock()

    def _check_category(self, category: str) -> None:
        if category not in self.current:
            raise KeyError(f"unknown ledger category {category!r}")

    def track_alloc(self, category: str, nbytes: int, label: str = "") -> None:
        self._check_category(category)
        if nbytes < 0:
            raise ValueError("allocation size must be non-negative")
        with self._lock:
            cur = self.current[category] + nbytes
            self.current[category] = cur
            if cur > self.peak[category]:
                self.peak[category] = cur
            self.total += nbytes
            if self.total > self.peak_total:
                self.peak_total = self.total
            if self.keep_events:
                self.events.append(LedgerEvent(time.perf_counter_ns(), category, nbytes, label, self.total))

    def track_free(self, category: str, nbytes: int, label: str = "") -> None:
        self._check_category(category)
        if nbytes < 0:
            raise ValueError("free size must be non-negative")
        with self._lock:
            if nbytes > self.current[category]:
                raise AccountingError(
                    f"freeing {nbytes} bytes of {category} ({label or 'unlabelled'}) "
                    f"with only {self.current[category]} tracked"
                )
            self.current[category] -= nbytes
            self.total -= nbytes
            if self.keep_events:
                self.events.append(LedgerEvent(time.perf_counter_ns(), category, -nbytes, label, self.total))

    def reset_peaks(self) -> None:
        """Start a new measurement window from the current counts."""
        with self._lock:
            self.peak = dict(self.current)
            self.peak_total = self.total

    def timeline(self) -> list[tuple[int, int]]:
        """(event index, total tracked bytes) after every event, led by the
        state before the first logged event."""
        if not self.events:
            return [(0, self.total)]
        first = self.events[0]
        points = [(0, first.total - first.delta)]
        points.extend((k + 1, e.total) for k, e in enumerate(self.events))
        return points

    def write_events_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ts_ns", "category", "delta_bytes", "label"])
            for e in self.events:
                w.writerow([e.ts_ns, e.category, e.delta, e.label])

    def write_summary_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "peak_bytes"])
            for c in CATEGORIES:
                w.writerow([c, self.peak[c]])
            w.writerow(["total", self.peak_total])


def alloc(ledger: MemoryLedger | None, category: str, nbytes: int, label: str = "") -> None:
    if ledger is not None:
        ledger.track_alloc(category, nbytes, label)


def free(ledger: MemoryLedger | None, category: str, nbytes: int, label: str = "") -> None:
    if ledger is not None:
        ledger.track_free(category, nbytes, label)


def iteration_profile(state, x, target, plan=None) -> list[tuple[int, int]]:
    """Run one training step and return ``(event index, total bytes)`` for
    every ledger event it produced, starting from the pre-step total.

    ``state.network`` must have been built with an event-keeping ledger.
    """
    from .checkpoint import train_step

    ledger = state.network.ledger
    if ledger is None or not ledger.keep_events:
        raise ValueError("iteration_profile needs a network with an event-keeping ledger")
    base = ledger.total
    if not state.network.layers:
        return [(0, base)]
    start = len(ledger.events)
    train_step(state, x, target, plan)
    return [(0, base)] + [(k + 1, e.total) for k, e in enumerate(ledger.events[start:])]


@dataclass
class PhaseTimer:
    durations_ns: dict[str, int] = field(default_factory=dict)
    _stack: list[str] = field(default_factory=list)

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        path = "/".join(self._stack + [name])
        self._stack.append(name)
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            elapsed = time.perf_counter_ns() - start
            self._stack.pop()
            self.durations_ns[path] = self.durations_ns.get(path, 0) + elapsed

    def seconds(self, path: str) -> float:
        return self.durations_ns.get(path, 0) / 1e9

    def ms(self, path: str) -> float:
        return self.durations_ns.get(path, 0) / 1e6
