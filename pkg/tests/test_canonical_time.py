import json

import pytest
from hypothesis import given, strategies as st

from iotx.canonical import canonicalize
from iotx.errors import MalformedPeriod, MalformedTimestamp, UnsupportedValue
from iotx.timefmt import format_period, format_timestamp, parse_period, parse_timestamp


def test_key_sort():
    assert canonicalize({"b": 1, "a": 2}) == b'{"a":2,"b":1}'


def test_empty_object():
    assert canonicalize({}) == b"{}"


def test_insertion_order_irrelevant():
    a = {"x": [1, {"q": True, "p": "s"}], "a": "é"}
    b = {"a": "é", "x": [1, {"p": "s", "q": True}]}
    assert canonicalize(a) == canonicalize(b)


def test_utf8_not_escaped():
    assert canonicalize({"k": "é"}) == '{"k":"é"}'.encode("utf-8")


@pytest.mark.parametrize("bad", [{"f": 1.5}, {1: "x"}, {"n": None}, [("t",)], {"s": "\ud800"}])
def test_unsupported_values(bad):
    with pytest.raises(UnsupportedValue):
        canonicalize(bad)


json_values = st.recursive(
    st.booleans() | st.integers() | st.text(),
    lambda children: st.lists(children, max_size=4) | st.dictionaries(st.text(max_size=6), children, max_size=4),
    max_leaves=12,
)


@given(json_values)
def test_canonical_roundtrip_is_injective(value):
    data = canonicalize(value)
    # decoding recovers the structure, so unequal bytes imply unequal values
    assert json.loads(data) == value
    assert canonicalize(json.loads(data)) == data


def test_period_six_hours():
    assert parse_period("06:00:00") == 21600


def test_both_timestamp_forms_agree():
    assert parse_timestamp("2019-10-01:00:00:00") == parse_timestamp("2019-10-01T00:00:00Z") == 1569888000


@pytest.mark.parametrize(
    "text",
    ["2019-13-01:00:00:00", "2019-02-30:00:00:00", "2019-10-01T00:00:00", "2019-10-01:00:00:00Z",
     "2019-10-01 00:00:00", "", "2019-10-01:24:00:00"],
)
def test_malformed_timestamps(text):
    with pytest.raises(MalformedTimestamp):
        parse_timestamp(text)


@pytest.mark.parametrize("text", ["6:00:00", "06:60:00", "06:00", "-1:00:00", "aa:bb:cc"])
def test_malformed_periods(text):
    with pytest.raises(MalformedPeriod):
        parse_period(text)


@given(st.integers(min_value=0, max_value=4102444799))
def test_timestamp_format_roundtrip(t):
    assert parse_timestamp(format_timestamp(t)) == t


@given(st.integers(min_value=0, max_value=10**7))
def test_period_format_roundtrip(s):
    assert parse_period(format_period(s)) == s
