"""Injectable clocks. All times are integer UTC epoch seconds."""

from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now(self) -> int: ...


class SystemClock:
    def now(self) -> int:
        return int(time.time())

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class ManualClock:
    """A clock that only moves when told to."""

    def __init__(self, start: int = 0):
        self._now = int(start)
        self._lock = threading.Lock()

    def now(self) -> int:
        return self._now

    def set(self, t: int) -> None:
        with self._lock:
            self._now = int(t)

    def advance(self, seconds: int) -> int:
        with self._lock:
            self._now += int(seconds)
            return self._now

    def sleep(self, seconds: float) -> None:
        self.advance(int(seconds))


def make_clock(mode: str, start: int | None = None) -> SystemClock | ManualClock:
    if mode == "real":
        return SystemClock()
    if mode == "manual":
        return ManualClock(start if start is not None else int(time.time()))
    raise ValueError(f"unknown clock mode {mode!r}")
