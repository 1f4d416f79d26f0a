"""Deterministic JSON bytes for signing.

Keys sorted by code point, no whitespace, UTF-8, integers in minimal form.
Floats and null are refused outright; timestamps and decimals travel as
strings so there is never a question of how a number is rendered.
"""

from __future__ import annotations

import json
from typing import Any

from .errors import UnsupportedValue


def _check(value: Any, path: str) -> None:
    if isinstance(value, bool) or isinstance(value, int):
        return
    if isinstance(value, str):
        try:
            value.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise UnsupportedValue(f"{path}: string not encodable as UTF-8") from exc
        return
    if isinstance(value, list):
        for i, item in enumerate(value):
            _check(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise UnsupportedValue(f"{path}: non-string key {k!r}")
            _check(k, path)
            _check(v, f"{path}.{k}")
        return
    raise UnsupportedValue(f"{path}: unsupported type {type(value).__name__}")


def canonicalize(document: Any) -> bytes:
    _check(document, "$")
    return json.dumps(
        document,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def canonical_text(document: Any) -> str:
    return canonicalize(document).decode("utf-8")
