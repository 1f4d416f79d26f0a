"""Edge telemetry store.

Wide-column layout: one partition per device, rows clustered by
timestamp (ties broken by arrival order). Only an in-process store is
provided; anything with ``put`` and ``scan`` can replace it.
"""

from __future__ import annotations

import bisect
import threading
from collections import defaultdict
from typing import Iterator, Protocol

from .telemetry import TelemetryRecord


class EdgeStore(Protocol):
    def put(self, record: TelemetryRecord) -> None: ...

    def scan(self, device_did: str, after: int | None = None, until: int | None = None,
             *, since: int | None = None) -> list[TelemetryRecord]: ...

    def latest(self, device_did: str) -> int | None: ...


class MemoryEdgeStore:
    def __init__(self):
        self._keys: dict[str, list[tuple[int, int]]] = defaultdict(list)
        self._rows: dict[str, list[TelemetryRecord]] = defaultdict(list)
        self._seq = 0
        self._lock = threading.Lock()

    def put(self, record: TelemetryRecord) -> None:
        with self._lock:
            self._seq += 1
            key = (record.timestamp, self._seq)
            keys = self._keys[record.device_did]
            i = bisect.bisect_right(keys, key)
            keys.insert(i, key)
            self._rows[record.device_did].insert(i, record)

    def scan(self, device_did: str, after: int | None = None, until: int | None = None,
             *, since: int | None = None) -> list[TelemetryRecord]:
        """Rows of one device in timestamp order.

        ``after`` is exclusive, ``since`` inclusive, ``until`` inclusive.
        """
        with self._lock:
            keys = self._keys.get(device_did, [])
            rows = self._rows.get(device_did, [])
            lo = 0
            if after is not None:
                lo = bisect.bisect_right(keys, (after, float("inf")))
            elif since is not None:
                lo = bisect.bisect_left(keys, (since, -1))
            hi = len(keys) if until is None else bisect.bisect_right(keys, (until, float("inf")))
            return rows[lo:hi]

    def latest(self, device_did: str) -> int | None:
        keys = self._keys.get(device_did)
        return keys[-1][0] if keys else None

    def devices(self) -> Iterator[str]:
        return iter(list(self._rows))

    def __len__(self) -> int:
        return sum(len(v) for v in self._rows.values())
