"""Field-level privacy filters applied in succession to data and control flows.

A filter names the fields it targets (exact names, or ``prefix.*``
patterns) and either redacts them to ``"***"`` or drops them. Filters are
pure per-record functions; one record in, one record out, with the device
DID and timestamp untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .errors import FilterConfigError, UnknownFilter
from .telemetry import TelemetryRecord

REDACTED = "***"


class Mode(str, Enum):
    REDACT = "Redact"
    DROP = "Drop"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        for m in cls:
            if m.value.lower() == str(text).lower():
                return m
        raise FilterConfigError(f"unknown filter mode {text!r}")


@dataclass(frozen=True)
class FilterDef:
    name: str
    target_fields: frozenset[str]
    mode: Mode = Mode.REDACT

    def __post_init__(self):
        if not self.name:
            raise FilterConfigError("filter name must be nonempty")
        object.__setattr__(self, "target_fields", frozenset(self.target_fields))
        if not self.target_fields:
            raise FilterConfigError(f"filter {self.name!r} targets no fields")
        for pattern in self.target_fields:
            if not pattern or (pattern.endswith("*") and not pattern.endswith(".*")) or "*" in pattern[:-1]:
                raise FilterConfigError(f"bad field pattern {pattern!r}")

    def matches(self, field_name: str) -> bool:
        for pattern in self.target_fields:
            if pattern.endswith(".*"):
                if field_name.startswith(pattern[:-1]):
                    return True
            elif field_name == pattern:
                return True
        return False

    def to_dict(self) -> dict:
        return {"name": self.name, "targetFields": sorted(self.target_fields), "mode": self.mode.value}

    @classmethod
    def from_dict(cls, data: Mapping) -> "FilterDef":
        try:
            return cls(data["name"], frozenset(data["targetFields"]), Mode.parse(data.get("mode", "Redact")))
        except (KeyError, TypeError) as exc:
            raise FilterConfigError(f"bad filter definition {data!r}") from exc


BUILTIN_FILTERS = (
    FilterDef("redact_location", frozenset({"lat", "lon", "location"})),
    FilterDef("redact_device_id", frozenset({"loraId", "macAddress", "deviceSerial"})),
)


def apply_filter(f: FilterDef, record: TelemetryRecord) -> TelemetryRecord:
    out = {}
    for name, value in record.fields.items():
        if not f.matches(name):
            out[name] = value
        elif f.mode is Mode.REDACT:
            out[name] = REDACTED
    return record.with_fields(out)


class FilterRegistry:
    """Name -> filter definitions. Built-ins are always present and cannot be shadowed."""

    def __init__(self, extra: Iterable[FilterDef] = ()):
        filters = {f.name: f for f in BUILTIN_FILTERS}
        for f in extra:
            if f.name in filters:
                raise FilterConfigError(f"filter {f.name!r} is already registered")
            filters[f.name] = f
        self._filters = MappingProxyType(filters)

    @classmethod
    def from_file(cls, path: str | Path) -> "FilterRegistry":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, list):
            raise FilterConfigError("filter config must be a JSON list")
        return cls(FilterDef.from_dict(d) for d in data)

    def __contains__(self, name: object) -> bool:
        return name in self._filters

    def __getitem__(self, name: str) -> FilterDef:
        try:
            return self._filters[name]
        except KeyError:
            raise UnknownFilter(name) from None

    def names(self) -> list[str]:
        return list(self._filters)

    def check(self, chain: Sequence[str]) -> None:
        for name in chain:
            self[name]

    def apply_chain(self, chain: Sequence[str], record: TelemetryRecord) -> TelemetryRecord:
        filters = [self[name] for name in chain]
        for f in filters:
            record = apply_filter(f, record)
        return record


DEFAULT_REGISTRY = FilterRegistry()


def apply_chain(chain: Sequence[str], record: TelemetryRecord,
                registry: FilterRegistry = DEFAULT_REGISTRY) -> TelemetryRecord:
    return registry.apply_chain(chain, record)
