import threading
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from iotx.credential import sign_credential
from iotx.crypto import LocalSigner
from iotx.errors import (
    CapacityExceeded,
    ClockSkew,
    DeviceNotInGrant,
    DuplicateConnectivityId,
    GrantNotActive,
    NonMonotoneTimestamp,
    NotGrantee,
    OutsideWindow,
    PeriodNotElapsed,
    PermissionDenied,
    SignatureInvalid,
    UnknownConnectivityType,
    UnknownDevice,
    UnknownVcId,
    VcIdAlreadyUsed,
    VcIdIssuerMismatch,
    VerificationFailed,
)
from iotx.exchange import GrantState
from iotx.identity import parse_did
from iotx.policy import OwnerPolicy
from iotx.privacy import REDACTED
from iotx.telemetry import SignedRecord, TelemetryRecord

from .conftest import T0, make_agent
from .harness import build_world

EXAMPLE_MAC = "00:0a:95:9d:68:16"
H6 = 6 * 3600


@pytest.fixture
def world():
    return build_world(n_lora=2)


def test_register_ethernet(exchange, owner):
    reg = exchange.register_device(owner.did, "EthernetMacAddress", EXAMPLE_MAC, "SN-E")
    doc = exchange.resolve(reg.did)
    assert doc.service("EthernetMacAddress").service_endpoint == EXAMPLE_MAC
    assert reg.owner_did == owner.did
    with pytest.raises(DuplicateConnectivityId):
        exchange.register_device(owner.did, "EthernetMacAddress", EXAMPLE_MAC, "SN-E2")


def test_register_lora_maps_all_keys(exchange, owner, keystore):
    reg = exchange.register_device(owner.did, "LoRaDeviceEUI", "A81758FFFE03AB42", "SN-L")
    m = keystore.lookup_by("connectivityId", "A81758FFFE03AB42")
    assert m.did == reg.did
    assert keystore.public_key(m.key_handle) == exchange.resolve(reg.did).public_key


def test_register_bad_connectivity(exchange, owner):
    with pytest.raises(UnknownConnectivityType):
        exchange.register_device(owner.did, "Zigbee", "abc", "SN")


def test_register_rolls_back_on_publish_failure(exchange, owner, keystore, monkeypatch):
    before = len(keystore.mappings())
    handles = set(keystore._keys)

    def boom(doc):
        raise OSError("disk full")

    monkeypatch.setattr(exchange.resolver, "publish", boom)
    with pytest.raises(OSError):
        exchange.register_device(owner.did, "EthernetMacAddress", EXAMPLE_MAC, "SN-E")
    assert len(keystore.mappings()) == before
    assert set(keystore._keys) == handles
    monkeypatch.undo()
    exchange.register_device(owner.did, "EthernetMacAddress", EXAMPLE_MAC, "SN-E")


def test_vc_ids_are_unique_hex(world):
    ids = {world.exchange.issue_vc_id(world.owner.did) for _ in range(200)}
    assert len(ids) == 200
    assert all(len(i) == 32 and int(i, 16) >= 0 for i in ids)


def test_present_activates_with_chains(world):
    vc = world.issue()
    grant = world.exchange.present_credential(vc)
    assert grant.state is GrantState.ACTIVE
    assert grant.filter_chains == {d: ["redact_location", "redact_device_id"] for d in world.devices}
    assert world.exchange.ledger_entry(vc.vc_id).consumed
    assert all(world.fleet.notices[d][0]["vcId"] == vc.vc_id for d in world.devices)


def test_present_exempt_has_no_chains(world):
    vc = world.issue(policy=OwnerPolicy(privacy_exempt=frozenset({world.customer.did})))
    assert world.exchange.present_credential(vc).filter_chains == {}


def test_present_twice(world):
    vc = world.issue()
    world.exchange.present_credential(vc)
    with pytest.raises(VcIdAlreadyUsed) as exc:
        world.exchange.present_credential(vc)
    assert exc.value.step == 2


def test_present_invented_id(world):
    vc = world.issue()
    forged = sign_credential(replace(vc, vc_id="ff" * 16, proof=b""), world.owner.signer, world.resolver)
    with pytest.raises(UnknownVcId):
        world.exchange.present_credential(forged)


def test_present_issuer_mismatch(world):
    vc = world.issue()
    other = make_agent(world.resolver)
    vc_id = world.exchange.issue_vc_id(other.did)
    moved = sign_credential(replace(vc, vc_id=vc_id, proof=b""), world.owner.signer, world.resolver)
    with pytest.raises(VcIdIssuerMismatch):
        world.exchange.present_credential(moved)


def test_present_tampered(world):
    vc = world.issue()
    tampered = replace(vc, subject=replace(vc.subject, period="00:00:01"))
    with pytest.raises(VerificationFailed) as exc:
        world.exchange.present_credential(tampered)
    assert exc.value.to_dict()["reason"] == "ProofInvalid"
    assert not world.exchange.ledger_entry(vc.vc_id).consumed


def test_present_by_non_owner(world):
    stranger = make_agent(world.resolver)
    vc = world.issue()
    vc_id = world.exchange.issue_vc_id(stranger.did)
    stolen = sign_credential(replace(vc, vc_id=vc_id, issuer=parse_did(stranger.did), proof=b""),
                             stranger.signer, world.resolver)
    with pytest.raises(VerificationFailed) as exc:
        world.exchange.present_credential(stolen)
    assert exc.value.to_dict()["reason"] == "NotDeviceOwner"


def test_capacity_at_presentation_consumes_vc_id(world):
    a, b = world.issue(), world.issue()
    world.set_policy(OwnerPolicy(device_capacity={world.devices[0]: 1}))
    world.exchange.present_credential(a)
    with pytest.raises(CapacityExceeded) as exc:
        world.exchange.present_credential(b)
    assert exc.value.step == 3
    assert world.exchange.ledger_entry(b.vc_id).consumed


def _granted(world, **draft):
    vc = world.issue(world.draft(**draft))
    world.exchange.present_credential(vc)
    return vc.vc_id


def test_period_boundary(world):
    vc_id = _granted(world)
    world.run(2 * 86400)
    ex, dev, who = world.exchange, world.devices[0], world.customer.did
    first = ex.access_data(who, vc_id, dev, as_of=T0)
    assert first
    with pytest.raises(PeriodNotElapsed):
        ex.access_data(who, vc_id, dev, as_of=T0 + H6 - 1)
    second = ex.access_data(who, vc_id, dev, as_of=T0 + H6)
    assert second
    # the failed probe does not reset the cadence
    assert min(r.timestamp for r in second) > T0
    assert max(r.timestamp for r in second) <= T0 + H6


def test_periods_are_per_device(world):
    vc_id = _granted(world)
    world.run(86400)
    ex, who = world.exchange, world.customer.did
    ex.access_data(who, vc_id, world.devices[0], as_of=T0 + 100)
    ex.access_data(who, vc_id, world.devices[1], as_of=T0 + 100)


def test_data_is_filtered(world):
    vc_id = _granted(world)
    world.run(86400)
    rows = world.exchange.access_data(world.customer.did, vc_id, world.devices[0], as_of=T0 + 3600)
    assert rows and all(r.fields["lat"] == REDACTED and r.fields["loraId"] == REDACTED for r in rows)
    assert all(r.fields["temp"] != REDACTED for r in rows)
    raw = world.exchange.store.scan(world.devices[0])
    assert raw[0].fields["lat"] == "1.3521"


def test_outside_window(world):
    vc_id = _granted(world)
    world.clock.set(T0)
    with pytest.raises(OutsideWindow):
        world.exchange.access_data(world.customer.did, vc_id, world.devices[0], as_of=T0 - 1)


def test_clock_skew(world):
    vc_id = _granted(world)
    with pytest.raises(ClockSkew):
        world.exchange.access_data(world.customer.did, vc_id, world.devices[0], as_of=world.clock.now() + 60)


def test_not_grantee(world):
    vc_id = _granted(world)
    world.clock.set(T0 + 10)
    with pytest.raises(NotGrantee):
        world.exchange.access_data(world.owner.did, vc_id, world.devices[0])


def test_permission_denied(world):
    vc_id = _granted(world)
    world.clock.set(T0 + 10)
    with pytest.raises(PermissionDenied):
        world.exchange.access_control(world.customer.did, vc_id, world.devices[0], {"setpoint": 21})


def test_control_delivered_in_order(world):
    vc_id = _granted(world, permissions=("data", "control"), period="00:00:10")
    world.clock.set(T0 + 100)
    ex, who, dev = world.exchange, world.customer.did, world.devices[0]
    ex.access_control(who, vc_id, dev, {"setpoint": 21}, as_of=T0 + 50)
    out = ex.access_control(who, vc_id, dev, {"setpoint": 22, "lat": "9.9"}, as_of=T0 + 60)
    assert out == {"setpoint": 22, "lat": REDACTED}
    queue = list(world.fleet.devices[dev].command_queue)
    assert [c["setpoint"] for c in queue] == [21, 22]
    # data and control keep separate cadences
    ex.access_data(who, vc_id, dev, as_of=T0 + 60)


def test_device_not_in_grant(world):
    vc_id = _granted(world, devices=[world.devices[0]])
    world.clock.set(T0 + 10)
    with pytest.raises(DeviceNotInGrant):
        world.exchange.access_data(world.customer.did, vc_id, world.devices[1])


def test_expire(world):
    vc_id = _granted(world, end="2019-10-02:00:00:00")
    world.clock.set(T0 + 2 * 86400)
    assert world.exchange.expire_grants() == 1
    with pytest.raises(GrantNotActive):
        world.exchange.access_data(world.customer.did, vc_id, world.devices[0], as_of=T0 + 10)
    with pytest.raises(OutsideWindow):
        world.exchange.access_data(world.customer.did, vc_id, world.devices[0])
    assert world.exchange.active_grants(world.devices[0]) == 0


def test_ingest_checks(world):
    dev = world.fleet.devices[world.devices[0]]
    rec = TelemetryRecord(dev.did, T0, dev.fields(T0))
    ex = world.exchange
    forged = SignedRecord(rec, LocalSigner().sign(rec.payload()))
    with pytest.raises(SignatureInvalid):
        ex.ingest_telemetry(dev.connectivity_id, forged)
    good = SignedRecord(rec, world.keystore.sign_with(dev.key_handle, rec.payload()))
    ex.ingest_telemetry(dev.connectivity_id, good)
    with pytest.raises(SignatureInvalid):
        other = world.fleet.devices[world.devices[1]]
        ex.ingest_telemetry(other.connectivity_id, good)
    old = TelemetryRecord(dev.did, T0 - 1, dev.fields(T0))
    with pytest.raises(NonMonotoneTimestamp):
        ex.ingest_telemetry(dev.connectivity_id, SignedRecord(old, world.keystore.sign_with(dev.key_handle, old.payload())))
    with pytest.raises(UnknownDevice):
        ex.ingest_telemetry("FFFFFFFFFFFFFFFF", good)


def test_concurrent_presentation_single_winner(world):
    vc = world.issue()
    wins, errors = [], []
    barrier = threading.Barrier(20)

    def attempt():
        barrier.wait()
        try:
            wins.append(world.exchange.present_credential(vc))
        except VcIdAlreadyUsed as exc:
            errors.append(exc)

    threads = [threading.Thread(target=attempt) for _ in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(wins) == 1 and len(errors) == 19
    assert len(world.exchange.grants()) == 1


def test_concurrent_capacity(world):
    world.set_policy(OwnerPolicy(device_capacity={world.devices[0]: 3}))
    vcs = [world.issue() for _ in range(12)]
    wins = []
    barrier = threading.Barrier(len(vcs))

    def attempt(vc):
        barrier.wait()
        try:
            wins.append(world.exchange.present_credential(vc))
        except CapacityExceeded:
            pass

    threads = [threading.Thread(target=attempt, args=(vc,)) for vc in vcs]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(wins) == 3
    assert world.exchange.active_grants(world.devices[0]) == 3


# one world reused across examples; each example gets a fresh grant
_PROP_WORLD = build_world(n_lora=1, interval=900)
_PROP_WORLD.set_policy(replace(_PROP_WORLD.policy, device_capacity={_PROP_WORLD.devices[0]: 10**6}))
_PROP_WORLD.run(29 * 86400)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(
    period=st.integers(min_value=60, max_value=86400),
    offsets=st.lists(st.integers(min_value=0, max_value=29 * 86400 - 3600), min_size=1, max_size=12),
)
def test_period_enforcement_property(period, offsets):
    w = _PROP_WORLD
    vc_id = _granted(w, period=f"{period // 3600:02d}:{period % 3600 // 60:02d}:{period % 60:02d}")
    served = []
    for off in sorted(offsets):
        try:
            w.exchange.access_data(w.customer.did, vc_id, w.devices[0], as_of=T0 + off)
            served.append(T0 + off)
        except PeriodNotElapsed:
            assert served and T0 + off - served[-1] < period
    assert all(b - a >= period for a, b in zip(served, served[1:]))


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(offset=st.integers(min_value=0, max_value=29 * 86400 - 3600))
def test_filter_cannot_be_bypassed(offset):
    w = _PROP_WORLD
    vc_id = _granted(w)
    rows = w.exchange.access_data(w.customer.did, vc_id, w.devices[0], as_of=T0 + offset)
    for r in rows:
        for name in ("lat", "lon", "loraId"):
            assert r.fields.get(name, REDACTED) == REDACTED
