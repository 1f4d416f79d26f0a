"""Telemetry records: one timestamped reading as a flat field map."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from .canonical import canonicalize
from .errors import MalformedTimestamp, SignatureInvalid
from .timefmt import format_timestamp, parse_timestamp

FieldValue = str | int


def _check_fields(fields: Mapping[str, Any]) -> dict[str, FieldValue]:
    out = {}
    for name, value in fields.items():
        if not isinstance(name, str) or not name:
            raise ValueError("field names must be nonempty strings")
        if isinstance(value, bool) or not isinstance(value, (str, int)):
            raise ValueError(f"field {name!r} must be a string or integer")
        out[name] = value
    return out


@dataclass(frozen=True)
class TelemetryRecord:
    device_did: str
    timestamp: int
    fields: Mapping[str, FieldValue] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "fields", _check_fields(self.fields))

    def with_fields(self, fields: Mapping[str, FieldValue]) -> "TelemetryRecord":
        return TelemetryRecord(self.device_did, self.timestamp, dict(fields))

    def to_dict(self) -> dict:
        return {
            "deviceDid": self.device_did,
            "timestamp": format_timestamp(self.timestamp),
            "fields": dict(self.fields),
        }

    def payload(self) -> bytes:
        return canonicalize(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TelemetryRecord":
        return cls(data["deviceDid"], parse_timestamp(data["timestamp"]), dict(data["fields"]))


@dataclass(frozen=True)
class SignedRecord:
    record: TelemetryRecord
    signature: bytes

    def to_dict(self) -> dict:
        out = self.record.to_dict()
        out["signature"] = self.signature.hex()
        return out

    def to_json(self) -> bytes:
        return canonicalize(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SignedRecord":
        if not isinstance(data, Mapping) or set(data) != {"deviceDid", "timestamp", "fields", "signature"}:
            raise SignatureInvalid("signed record must carry deviceDid, timestamp, fields, signature")
        try:
            record = TelemetryRecord.from_dict(data)
            signature = bytes.fromhex(data["signature"])
        except (MalformedTimestamp, ValueError, TypeError, AttributeError) as exc:
            raise SignatureInvalid(f"malformed record: {exc}") from exc
        return cls(record, signature)

    @classmethod
    def from_json(cls, text: str | bytes) -> "SignedRecord":
        return cls.from_dict(json.loads(text))
