"""Discrete-event kernel: one simulated clock (integer milliseconds) and one
priority queue of callbacks that every subsystem schedules against.

The kernel itself is single-threaded: callbacks run in scheduling order, with
ties broken by a sequence counter, which is what makes whole-system runs
reproducible. Other threads (HTTP handlers, TCP bus connections, the CLI) may
inject work with ``submit``; injected work executes at the current simulated
time before the clock advances further.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional


@dataclass(order=True)
class _Scheduled:
    when: int
    seq: int
    fn: Callable[[], None] = field(compare=False)
    cancelled: bool = field(default=False, compare=False)


class Timer:
    """Handle for a scheduled (possibly repeating) callback."""

    def __init__(self, entry: _Scheduled):
        self._entry = entry

    def cancel(self) -> None:
        self._entry.cancelled = True

    def _rebind(self, entry: _Scheduled) -> None:
        self._entry = entry

    @property
    def cancelled(self) -> bool:
        return self._entry.cancelled


class Kernel:
    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._heap: list[_Scheduled] = []
        self._seq = itertools.count()
        self._injected: list[Callable[[], None]] = []
        self._lock = threading.Lock()
        self._wake = threading.Condition(self._lock)
        self._running = False
        self._stop = False
        self.on_error: Optional[Callable[[BaseException], None]] = None

    # -- time ---------------------------------------------------------------

    def now(self) -> int:
        return self._now

    # -- scheduling ---------------------------------------------------------

    def call_at(self, when_ms: int, fn: Callable[[], None]) -> Timer:
        if when_ms < self._now:
            when_ms = self._now
        entry = _Scheduled(when_ms, next(self._seq), fn)
        with self._wake:
            heapq.heappush(self._heap, entry)
            self._wake.notify()
        return Timer(entry)

    def call_after(self, delay_ms: int, fn: Callable[[], None]) -> Timer:
        return self.call_at(self._now + max(0, delay_ms), fn)

    def every(self, period_ms: int, fn: Callable[[], None], *, phase_ms: int = 0) -> Timer:
        """Run ``fn`` at now+phase, then every ``period_ms`` until cancelled."""
        if period_ms <= 0:
            raise ValueError("period must be positive")
        timer: Timer

        def tick() -> None:
            if timer.cancelled:
                return
            fn()
            if not timer.cancelled:
                timer._rebind(self.call_after(period_ms, tick)._entry)

        timer = self.call_after(phase_ms, tick)
        return timer

    def submit(self, fn: Callable[[], None]) -> None:
        """Thread-safe: run ``fn`` on the kernel at the current simulated time."""
        with self._wake:
            self._injected.append(fn)
            self._wake.notify()

    def call_soon(self, fn: Callable[[], None]) -> Timer:
        """Schedule ``fn`` at the current time (after already-queued work)."""
        return self.call_at(self._now, fn)

    # -- execution ----------------------------------------------------------

    def _drain_injected(self) -> bool:
        with self._lock:
            batch, self._injected = self._injected, []
        for fn in batch:
            self._run(fn)
        return bool(batch)

    def _run(self, fn: Callable[[], None]) -> None:
        try:
            fn()
        except Exception as exc:  # a broken handler must not kill the loop
            if self.on_error is not None:
                self.on_error(exc)
            else:
                raise

    def run_until(self, t_ms: int) -> None:
        """Process every event scheduled at or before ``t_ms``; set now to it."""
        while True:
            self._drain_injected()
            with self._lock:
                entry = self._heap[0] if self._heap else None
                if entry is None or entry.when > t_ms:
                    break
                heapq.heappop(self._heap)
            if entry.cancelled:
                continue
            self._now = max(self._now, entry.when)
            self._run(entry.fn)
        if t_ms > self._now:
            self._now = t_ms
        self._drain_injected()

    def run_for(self, dt_ms: int) -> None:
        self.run_until(self._now + dt_ms)

    def run_live(self, pace: float = 0.0, tick_ms: int = 100) -> None:
        """Free-running loop for service mode.

        ``pace`` maps simulated to wall time (1.0 = real time, 2.0 = twice as
        fast); 0 means as fast as possible. Runs until ``stop()``.
        """
        self._running = True
        self._stop = False
        wall_start = time.monotonic()
        sim_start = self._now
        try:
            while not self._stop:
                if pace > 0:
                    target = sim_start + int((time.monotonic() - wall_start) * 1000 * pace)
                    self.run_until(max(self._now, target))
                    with self._wake:
                        if not self._stop:
                            self._wake.wait(timeout=tick_ms / 1000.0)
                else:
                    self.run_for(tick_ms)
        finally:
            self._running = False

    def stop(self) -> None:
        with self._wake:
            self._stop = True
            self._wake.notify_all()

    def pending(self) -> int:
        with self._lock:
            return sum(1 for e in self._heap if not e.cancelled) + len(self._injected)
