"""Timestamp and period text forms.

Two timestamp spellings are accepted, both read as UTC:
``2019-10-01:00:00:00`` (colon between date and time) and
``2019-10-01T00:00:00Z``. Output is always the ISO form.
Periods are ``hh:mm:ss`` where hours may exceed 24.
"""

from __future__ import annotations

import calendar
import re
import time
from datetime import datetime

from .errors import MalformedPeriod, MalformedTimestamp

_TS = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})(?::|T)(\d{2}):(\d{2}):(\d{2})(Z?)$"
)
_PERIOD = re.compile(r"^(\d{2,}):(\d{2}):(\d{2})$")


def parse_timestamp(text: str) -> int:
    if not isinstance(text, str):
        raise MalformedTimestamp(f"not a string: {text!r}")
    m = _TS.match(text)
    if not m:
        raise MalformedTimestamp(text)
    sep_is_t = "T" in text
    # ISO form requires the trailing Z; the colon form forbids it
    if sep_is_t != bool(m.group(7)):
        raise MalformedTimestamp(text)
    y, mo, d, h, mi, s = (int(g) for g in m.groups()[:6])
    try:
        dt = datetime(y, mo, d, h, mi, s)
    except ValueError as exc:
        raise MalformedTimestamp(text) from exc
    return calendar.timegm(dt.timetuple())


def format_timestamp(epoch: int) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(int(epoch)))


def parse_period(text: str) -> int:
    if not isinstance(text, str):
        raise MalformedPeriod(f"not a string: {text!r}")
    m = _PERIOD.match(text)
    if not m:
        raise MalformedPeriod(text)
    h, mi, s = (int(g) for g in m.groups())
    if mi > 59 or s > 59:
        raise MalformedPeriod(text)
    return h * 3600 + mi * 60 + s


def format_period(seconds: int) -> str:
    if seconds < 0:
        raise MalformedPeriod(str(seconds))
    h, rem = divmod(int(seconds), 3600)
    return f"{h:02d}:{rem // 60:02d}:{rem % 60:02d}"
