"""Windowed instruction budgets.

Time is cut into fixed windows of ``window_us`` on a shared monotonic clock.
Each instance owns a :class:`Meter` that hands out fuel grants to the guest
(via the injected ``refuel`` import) and charges what the guest consumed to
the current window. A grant never exceeds what is left of the window's
budget, so ``instructions_used <= instructions_per_window`` holds exactly;
the overshoot allowance of the acceptance check is never drawn on.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Union

DEFAULT_WINDOW_US = 10_000
#: upper bound on a single grant; bounds how long a guest runs between host checks
DEFAULT_CHUNK = 5_000_000
#: allowed overshoot per window when checking usage logs
EPSILON = 10_000


class UnknownWindow(LookupError):
    pass


class InstanceStopped(Exception):
    """Raised inside host calls to unwind a guest the host has stopped."""


@dataclass(frozen=True)
class GasBudget:
    instructions_per_window: int
    window_us: int = DEFAULT_WINDOW_US

    def __post_init__(self) -> None:
        if self.window_us <= 0:
            raise ValueError("window_us must be > 0")
        if self.instructions_per_window < 0:
            raise ValueError("instructions_per_window must be >= 0")

    @classmethod
    def percent(cls, pct: float, capacity: int, window_us: int = DEFAULT_WINDOW_US) -> "GasBudget":
        """``pct`` percent of a calibrated per-window capacity, rounded down."""
        return cls(int(pct / 100.0 * capacity), window_us)


class _Unlimited:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNLIMITED"


UNLIMITED = _Unlimited()
Budget = Union[GasBudget, _Unlimited]


class WindowClock:
    def __init__(
        self,
        window_us: int = DEFAULT_WINDOW_US,
        clock_ns: Callable[[], int] = time.monotonic_ns,
        t0_ns: Optional[int] = None,
    ) -> None:
        if window_us <= 0:
            raise ValueError("window_us must be > 0")
        self.window_us = window_us
        self.clock_ns = clock_ns
        self.t0_ns = clock_ns() if t0_ns is None else t0_ns

    def now_ns(self) -> int:
        return self.clock_ns()

    def elapsed_us(self) -> int:
        return (self.clock_ns() - self.t0_ns) // 1000

    def window_of(self, t_ns: int) -> int:
        return max(0, (t_ns - self.t0_ns) // (self.window_us * 1000))

    def current(self) -> int:
        return self.window_of(self.clock_ns())

    def start_ns(self, window: int) -> int:
        return self.t0_ns + window * self.window_us * 1000

    def sleep_until(self, t_ns: int, stop: Optional[threading.Event] = None) -> None:
        delay = (t_ns - self.clock_ns()) / 1e9
        if delay <= 0:
            return
        if stop is not None:
            stop.wait(delay)
        else:
            time.sleep(delay)


@dataclass(frozen=True)
class WindowUsage:
    instance_id: int
    window_index: int
    instructions_used: int
    suspended: bool
    budget: Optional[int] = None
    t_ms: float = 0.0


class Meter:
    """Per-instance fuel accounting. Thread-safe; the guest thread is the main caller."""

    def __init__(
        self,
        instance_id: int,
        clock: WindowClock,
        budget: Budget = UNLIMITED,
        chunk: int = DEFAULT_CHUNK,
        on_suspend: Optional[Callable[[bool], None]] = None,
    ) -> None:
        self.instance_id = instance_id
        self.clock = clock
        self.chunk = chunk
        self._budget = budget
        self._lock = threading.Lock()
        self._window = clock.current()
        self._used = 0
        self._suspended_in_window = False
        self._granted = 0
        self._window_limit = self._limit()
        # a grant issued under the previous budget is still outstanding
        self._stale_grant = False
        self.total_used = 0
        self.records: dict[int, WindowUsage] = {}
        self.stop = threading.Event()
        self._on_suspend = on_suspend

    # -- budget -------------------------------------------------------------

    @property
    def budget(self) -> Budget:
        return self._budget

    def set_budget(self, budget: Budget) -> None:
        with self._lock:
            self._budget = budget
            # windows until the old grant is charged ran under two budgets; record them as unbudgeted
            self._window_limit = None
            self._stale_grant = True

    def _limit(self) -> Optional[int]:
        b = self._budget
        return None if b is UNLIMITED else b.instructions_per_window

    # -- window bookkeeping (lock held) ---------------------------------------

    def _close_through(self, window: int) -> None:
        """Close every window before ``window``."""
        while self._window < window:
            self.records[self._window] = WindowUsage(
                self.instance_id,
                self._window,
                self._used,
                self._suspended_in_window,
                self._window_limit,
                self._window * self.clock.window_us / 1000.0,
            )
            self._window += 1
            self._used = 0
            self._suspended_in_window = False
            self._window_limit = None if self._stale_grant else self._limit()

    def _charge(self, remaining: int) -> None:
        consumed = self._granted - remaining
        if consumed < 0:
            consumed = 0
        self._used += consumed
        self.total_used += consumed
        self._granted = remaining
        if self._stale_grant:
            self._window_limit = None
            self._stale_grant = False

    def _grant(self) -> int:
        limit = self._limit()
        avail = self.chunk if limit is None else min(self.chunk, limit - self._used)
        return max(avail, 0)

    # -- guest-facing ----------------------------------------------------------

    def refuel(self, remaining: int, cost: int) -> int:
        """Account for consumption since the last grant and return a new grant ``>= cost``.

        Blocks across window boundaries while the current window cannot
        cover ``cost``.
        """
        while True:
            if self.stop.is_set():
                raise InstanceStopped()
            with self._lock:
                self._charge(remaining)
                self._close_through(self.clock.current())
                grant = self._grant()
                if grant >= cost:
                    self._granted = grant
                    return grant
                self._suspended_in_window = True
                # nothing more may run this window
                self._granted = 0
                remaining = 0
                wake = self.clock.start_ns(self._window + 1)
            if self._on_suspend:
                self._on_suspend(True)
            self.clock.sleep_until(wake, self.stop)
            if self._on_suspend:
                self._on_suspend(False)

    def flush(self, remaining: int) -> int:
        """Non-blocking accounting checkpoint used by host calls; returns the new grant."""
        with self._lock:
            self._charge(remaining)
            self._close_through(self.clock.current())
            self._granted = self._grant()
            return self._granted

    def poll(self) -> None:
        """Close windows that have elapsed, from any thread."""
        with self._lock:
            self._close_through(self.clock.current())

    def finish(self) -> None:
        """Close the window in progress (used when the instance ends)."""
        with self._lock:
            self._close_through(self.clock.current() + 1)

    # -- queries -----------------------------------------------------------------

    def usage(self, window_index: int) -> WindowUsage:
        with self._lock:
            if window_index in self.records:
                return self.records[window_index]
            if window_index == self._window:
                return WindowUsage(
                    self.instance_id, window_index, self._used,
                    self._suspended_in_window, self._window_limit,
                    window_index * self.clock.window_us / 1000.0,
                )
        raise UnknownWindow(f"window {window_index} has not started for instance {self.instance_id}")

    def closed_records(self, start: int = 0) -> list[WindowUsage]:
        with self._lock:
            return [self.records[w] for w in sorted(self.records) if w >= start]
