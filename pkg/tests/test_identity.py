import hashlib
import threading
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from iotx.crypto import LocalSigner, verify
from iotx.errors import (
    DuplicateServiceType,
    IdBindingInvalid,
    MalformedDid,
    NotFound,
    ProofInvalid,
    ServiceSyntaxError,
    UnknownConnectivityType,
    UnknownMethod,
    UpdateUnauthorized,
)
from iotx.identity import (
    Did,
    DidDocument,
    HubMethodPlugin,
    IdentityHub,
    Resolver,
    ServiceEntry,
    build_document,
    derive_method_specific_id,
    local_resolver,
    parse_did,
)
from iotx.timefmt import format_timestamp

from .conftest import T0


def test_parse_reference_example():
    did = parse_did("did:example:1234567890abcdefg")
    assert did == Did("example", "1234567890abcdefg")
    assert str(did) == "did:example:1234567890abcdefg"


def test_parse_minimal():
    assert parse_did("did:iotx:x") == Did("iotx", "x")


@pytest.mark.parametrize("text", ["example:1234", "did::abc", "did:iotx:", "did:IOTX:abc", "did:io-tx:abc", "did:iotx"])
def test_parse_malformed(text):
    with pytest.raises(MalformedDid):
        parse_did(text)


idchar = st.sampled_from("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-%")


@given(
    st.text("abcdefghijklmnopqrstuvwxyz0123456789", min_size=1, max_size=10),
    st.lists(st.text(idchar, min_size=1, max_size=12), min_size=1, max_size=3),
)
def test_parse_serialize_roundtrip(method, segments):
    text = f"did:{method}:{':'.join(segments)}"
    assert str(parse_did(text)) == text


def test_create_with_reference_service(resolver):
    s = LocalSigner()
    doc = resolver.create_did("iotx", s.public_key, [("EthernetMacAddress", "00:0a:95:9d:68:16")], s, T0)
    assert doc.services == (ServiceEntry("EthernetMacAddress", "00:0a:95:9d:68:16", doc.id),)
    assert doc.to_dict()["services"] == [
        {"id": str(doc.id), "type": "EthernetMacAddress", "serviceEndpoint": "00:0a:95:9d:68:16"}
    ]
    assert doc.proof_valid()


def test_create_without_services(resolver):
    s = LocalSigner()
    doc = resolver.create_did("iotx", s.public_key, [], s, T0)
    assert doc.services == ()
    assert resolver.resolve(doc.id) == doc


def test_create_unknown_method(resolver):
    s = LocalSigner()
    with pytest.raises(UnknownMethod):
        resolver.create_did("unregistered", s.public_key, [], s, T0)


def test_method_specific_id_is_truncated_sha256(resolver):
    s = LocalSigner()
    doc = resolver.create_did("iotx", s.public_key, [], s, T0)
    expected = hashlib.sha256(s.public_key + b"2019-10-01T00:00:00Z").hexdigest()[:32]
    assert doc.id.method_specific_id == expected
    assert derive_method_specific_id(s.public_key, T0) == expected


def test_digest_determinism():
    s = LocalSigner()
    a = build_document("iotx", s.public_key, [], s, T0)
    b = build_document("iotx", s.public_key, [], s, T0)
    assert a.id == b.id


@pytest.mark.parametrize(
    "services, exc",
    [
        ([("EthernetMacAddress", "00:0a:95:9d:68")], ServiceSyntaxError),
        ([("LoRaDeviceEUI", "a81758fffe03ab4")], ServiceSyntaxError),
        ([("Bluetooth", "x")], UnknownConnectivityType),
        ([("WiFiMacAddress", "00:0a:95:9d:68:16"), ("WiFiMacAddress", "00:0a:95:9d:68:17")], DuplicateServiceType),
    ],
)
def test_service_rules(resolver, services, exc):
    s = LocalSigner()
    with pytest.raises(exc):
        resolver.create_did("iotx", s.public_key, services, s, T0)


def test_resolve_roundtrip_is_byte_identical(resolver):
    s = LocalSigner()
    doc = resolver.create_did("iotx", s.public_key, [("LoRaDeviceEUI", "A81758FFFE03AB42")], s, T0)
    assert resolver.resolve(str(doc.id)).canonical() == doc.canonical()
    assert DidDocument.from_json(doc.canonical()).canonical() == doc.canonical()


def test_resolve_missing_and_unknown(resolver):
    with pytest.raises(NotFound):
        resolver.resolve("did:iotx:" + "de" * 16)
    with pytest.raises(UnknownMethod):
        resolver.resolve("did:nosuch:abc")


def test_hub_store_fetch():
    hub = IdentityHub()
    s = LocalSigner()
    doc = build_document("iotx", s.public_key, [], s, T0)
    token = hub.store(doc)
    assert token == f"{doc.id}#1"
    assert hub.fetch(doc.id) == doc


def test_hub_rejects_corrupted_proof():
    hub = IdentityHub()
    s = LocalSigner()
    doc = build_document("iotx", s.public_key, [], s, T0)
    bad = bytearray(doc.proof)
    bad[7] ^= 0x01
    corrupted = replace(doc, proof=bytes(bad))
    # independent check straight against the Ed25519 primitive
    assert not verify(s.public_key, doc.payload(), bytes(bad))
    with pytest.raises(ProofInvalid):
        hub.store(corrupted)
    assert doc.id not in hub


def test_hub_update_by_owner_supersedes():
    hub = IdentityHub()
    s = LocalSigner()
    doc = build_document("iotx", s.public_key, [("WiFiMacAddress", "00:0a:95:9d:68:16")], s, T0)
    hub.store(doc)
    new = replace(doc, services=(ServiceEntry("WiFiMacAddress", "00:0a:95:9d:68:17", doc.id),), proof=b"")
    new = replace(new, proof=s.sign(new.payload()))
    assert hub.store(new) == f"{doc.id}#2"
    assert hub.fetch(doc.id) == new
    assert hub.history(doc.id) == [doc, new]


def test_hub_update_with_wrong_key_rejected():
    hub = IdentityHub()
    s, mallory = LocalSigner(), LocalSigner()
    doc = build_document("iotx", s.public_key, [], s, T0)
    hub.store(doc)
    # same key on record but signed by someone else
    forged = replace(doc, services=(ServiceEntry("WiFiMacAddress", "00:0a:95:9d:68:17", doc.id),))
    forged = replace(forged, proof=mallory.sign(forged.payload()))
    with pytest.raises(UpdateUnauthorized):
        hub.store(forged)
    # key swapped to the attacker's, self-consistently signed
    swapped = replace(doc, public_key=mallory.public_key)
    swapped = replace(swapped, proof=mallory.sign(swapped.payload()))
    with pytest.raises(UpdateUnauthorized):
        hub.store(swapped)
    assert hub.fetch(doc.id) == doc


def test_self_sovereignty_under_random_forgeries():
    hub = IdentityHub()
    s = LocalSigner()
    doc = build_document("iotx", s.public_key, [("WiFiMacAddress", "00:0a:95:9d:68:16")], s, T0)
    hub.store(doc)
    for i in range(50):
        attacker = LocalSigner()
        key = attacker.public_key if i % 2 else s.public_key
        forged = replace(doc, public_key=key, services=())
        forged = replace(forged, proof=attacker.sign(forged.payload()))
        with pytest.raises((UpdateUnauthorized, ProofInvalid)):
            hub.store(forged)
    assert hub.fetch(doc.id) == doc


def test_plugin_rejects_unbound_id():
    hub = IdentityHub()
    plugin = HubMethodPlugin("iotx", hub)
    s = LocalSigner()
    doc = build_document("iotx", s.public_key, [], s, T0)
    squat = replace(doc, id=Did("iotx", "00" * 16), proof=b"")
    squat = replace(squat, proof=s.sign(squat.payload()))
    with pytest.raises(IdBindingInvalid):
        plugin.publish(squat)


def test_hub_persistence_replays(tmp_path):
    path = tmp_path / "hub.jsonl"
    hub = IdentityHub(path)
    s = LocalSigner()
    doc = build_document("iotx", s.public_key, [("LoRaDeviceEUI", "a81758fffe03ab42")], s, T0)
    hub.store(doc)
    lines = path.read_bytes().splitlines()
    assert lines == [doc.canonical()]
    again = IdentityHub(path)
    assert again.fetch(doc.id).canonical() == doc.canonical()


def test_external_hub_as_second_plugin():
    local, external = IdentityHub(), IdentityHub()
    resolver = Resolver.of(HubMethodPlugin("iotx", local), HubMethodPlugin("exthub", external))
    s = LocalSigner()
    doc = resolver.create_did("exthub", s.public_key, [], s, T0)
    assert doc.id in external and doc.id not in local
    assert resolver.resolve(doc.id) == doc


def test_one_plugin_per_method():
    with pytest.raises(ValueError):
        Resolver.of(HubMethodPlugin("iotx", IdentityHub()), HubMethodPlugin("iotx", IdentityHub()))


def test_from_dict_rejects_mismatched_service_id(resolver):
    s = LocalSigner()
    doc = resolver.create_did("iotx", s.public_key, [("WiFiMacAddress", "00:0a:95:9d:68:16")], s, T0)
    data = doc.to_dict()
    data["services"][0]["id"] = "did:iotx:other"
    with pytest.raises(ServiceSyntaxError):
        DidDocument.from_dict(data)


def test_concurrent_updates_serialize():
    hub = IdentityHub()
    s = LocalSigner()
    doc = build_document("iotx", s.public_key, [], s, T0)
    hub.store(doc)

    def update(i):
        entry = ServiceEntry("WiFiMacAddress", f"00:0a:95:9d:68:{i:02x}", doc.id)
        new = replace(doc, services=(entry,))
        hub.store(replace(new, proof=s.sign(new.payload())))

    threads = [threading.Thread(target=update, args=(i,)) for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(hub.history(doc.id)) == 21
    assert format_timestamp(hub.fetch(doc.id).created) == "2019-10-01T00:00:00Z"


def test_local_resolver_helper():
    r = local_resolver()
    assert set(r.plugins) == {"iotx"}
