from __future__ import annotations

from dataclasses import dataclass

import pytest

from iotx.clock import ManualClock
from iotx.crypto import LocalSigner
from iotx.exchange import Exchange
from iotx.identity import Resolver, local_resolver
from iotx.keystore import KeyStore
from iotx.timefmt import parse_timestamp

T0 = parse_timestamp("2019-10-01:00:00:00")


@dataclass
class Agent:
    did: str
    signer: LocalSigner


def make_agent(resolver: Resolver, created: int = T0) -> Agent:
    signer = LocalSigner()
    doc = resolver.create_did("iotx", signer.public_key, [], signer, created)
    return Agent(str(doc.id), signer)


@pytest.fixture
def clock():
    return ManualClock(T0 - 3600)


@pytest.fixture
def resolver():
    return local_resolver()


@pytest.fixture
def keystore(clock):
    return KeyStore(clock=clock)


@pytest.fixture
def exchange(resolver, keystore, clock):
    return Exchange(resolver, keystore, clock=clock)


@pytest.fixture
def owner(resolver):
    return make_agent(resolver)


@pytest.fixture
def customer(resolver):
    return make_agent(resolver)


def lora_eui(i: int) -> str:
    return f"a81758fffe{i:06x}"


def mac(i: int) -> str:
    raw = f"000a95{i:06x}"
    return ":".join(raw[k:k + 2] for k in range(0, 12, 2))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
