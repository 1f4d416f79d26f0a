"""Simulated device fleet.

Devices emit signed telemetry on a fixed interval and accept control
commands. Output is a pure function of (seed, profile, schedule): the
temperature is a seeded random walk in hundredths of a degree, so values
stay exact decimals carried as strings.
"""

from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .errors import IotxError, UnknownDevice
from .identity import check_connectivity
from .keystore import KeyCustody
from .telemetry import SignedRecord, TelemetryRecord

BASE_TEMP_CENTI = 2500
STEP_CENTI = 50
MAX_STEPS = 10_000_000


class Profile(str, Enum):
    LORA_TEMP_LOCATION = "LoRaTempLocation"
    ETHERNET_GENERIC = "EthernetGeneric"

    @property
    def connectivity_type(self) -> str:
        return "LoRaDeviceEUI" if self is Profile.LORA_TEMP_LOCATION else "EthernetMacAddress"


def _centi(value: int) -> str:
    sign = "-" if value < 0 else ""
    whole, frac = divmod(abs(value), 100)
    return f"{sign}{whole}.{frac:02d}"


@dataclass
class SimDevice:
    profile: Profile
    connectivity_id: str
    key_handle: str
    emit_interval: int
    rng_seed: int
    did: str = ""
    lat: str = "1.3521"
    lon: str = "103.8198"
    epoch: int | None = None
    command_queue: list[dict] = field(default_factory=list)
    _walk: list[int] = field(default_factory=lambda: [BASE_TEMP_CENTI], repr=False)
    _rng: random.Random | None = field(default=None, repr=False)

    def __post_init__(self):
        self.profile = Profile(self.profile)
        check_connectivity(self.profile.connectivity_type, self.connectivity_id)
        if self.emit_interval <= 0:
            raise ValueError("emitInterval must be positive")

    def temperature(self, at: int) -> str:
        """Walk position after one step per interval elapsed since ``epoch``.

        A device without an epoch takes its first emission time as epoch.
        """
        if self.epoch is None:
            self.epoch = at
        steps = max(0, (at - self.epoch) // self.emit_interval)
        if steps > MAX_STEPS:
            raise ValueError(f"{steps} walk steps since epoch; set the device epoch")
        if self._rng is None:
            self._rng = random.Random(self.rng_seed)
        walk = self._walk
        while len(walk) <= steps:
            walk.append(walk[-1] + self._rng.randint(-STEP_CENTI, STEP_CENTI))
        return _centi(self._walk[steps])

    def fields(self, at: int) -> dict[str, str]:
        if self.profile is Profile.LORA_TEMP_LOCATION:
            return {"temp": self.temperature(at), "lat": self.lat, "lon": self.lon,
                    "loraId": self.connectivity_id}
        return {"temp": self.temperature(at), "macAddress": self.connectivity_id}


def emit(device: SimDevice, at: int, keystore: KeyCustody) -> SignedRecord:
    record = TelemetryRecord(device.did, at, device.fields(at))
    return SignedRecord(record, keystore.sign_with(device.key_handle, record.payload()))


@dataclass
class FleetReport:
    counts: dict[str, int] = field(default_factory=dict)
    errors: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


class Fleet:
    """A set of simulated devices; also acts as the exchange's device gateway."""

    def __init__(self, devices: Iterable[SimDevice] = ()):
        self.devices: dict[str, SimDevice] = {}
        self.notices: dict[str, list[dict]] = {}
        self._lock = threading.Lock()
        for d in devices:
            self.add(d)

    def add(self, device: SimDevice) -> None:
        self.devices[device.did or device.connectivity_id] = device

    def __iter__(self):
        return iter(self.devices.values())

    def __len__(self) -> int:
        return len(self.devices)

    def deliver_command(self, device_did: str, command: Mapping[str, Any]) -> None:
        device = self.devices.get(device_did)
        if device is None:
            raise UnknownDevice(device_did)
        with self._lock:
            device.command_queue.append(dict(command))

    def notify_grant(self, device_did: str, grant: Mapping[str, Any]) -> None:
        with self._lock:
            self.notices.setdefault(device_did, []).append(dict(grant))


def deliver_command(fleet: Fleet, device_did: str, command: Mapping[str, Any]) -> None:
    fleet.deliver_command(device_did, command)


def load_fleet(path: str | Path, keystore: KeyCustody, epoch: int | None = None) -> Fleet:
    """Build a fleet from a JSON config, binding devices to their registered keys."""
    entries = json.loads(Path(path).read_text())
    return fleet_from_config(entries, keystore, epoch)


def fleet_from_config(entries: list[Mapping], keystore: KeyCustody, epoch: int | None = None) -> Fleet:
    fleet = Fleet()
    for e in entries:
        mapping = keystore.lookup_by("connectivityId", e["connectivityId"])
        fleet.add(SimDevice(
            profile=Profile(e["profile"]),
            connectivity_id=e["connectivityId"],
            key_handle=mapping.key_handle,
            emit_interval=int(e["emitInterval"]),
            rng_seed=int(e["rngSeed"]),
            did=mapping.did,
            lat=str(e.get("lat", "1.3521")),
            lon=str(e.get("lon", "103.8198")),
            epoch=epoch,
        ))
    return fleet


Sink = Callable[[str, SignedRecord], Any]


def run_fleet(devices: Iterable[SimDevice], duration: int, clock, keystore: KeyCustody,
              sink: Sink) -> FleetReport:
    """Emit ``duration // interval`` records per device and hand each to ``sink``.

    A clock with a ``set`` method (a :class:`ManualClock` or a remote manual
    clock) is stepped to each emission time; otherwise the call sleeps in
    real time. Failures are recorded per
    record and do not stop the rest of the fleet.
    """
    devices = list(devices)
    start = clock.now()
    schedule = sorted(
        (start + k * d.emit_interval, i)
        for i, d in enumerate(devices)
        for k in range(1, duration // d.emit_interval + 1)
    )
    for d in devices:
        if d.epoch is None:
            d.epoch = start
    report = FleetReport(counts={d.connectivity_id: 0 for d in devices})
    manual = callable(getattr(clock, "set", None))
    t0 = time.monotonic()
    for at, i in schedule:
        if manual:
            clock.set(at)
        else:
            delay = (at - start) - (time.monotonic() - t0)
            if delay > 0:
                time.sleep(delay)
        device = devices[i]
        try:
            sink(device.connectivity_id, emit(device, at, keystore))
        except IotxError as exc:
            report.errors.append((device.connectivity_id, at, exc.reason))
        else:
            report.counts[device.connectivity_id] += 1
    if manual:
        clock.set(start + duration)
    return report
