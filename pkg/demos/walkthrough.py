"""Walk through one data-sharing deal from device registration to fetch.

Runs entirely in-process on a manual clock, so it finishes instantly and
prints the same output every time apart from the freshly generated keys.

    python3 demos/walkthrough.py
"""

from __future__ import annotations

import json

from iotx.clock import ManualClock
from iotx.crypto import LocalSigner
from iotx.devicesim import Fleet, Profile, SimDevice, run_fleet
from iotx.errors import IotxError
from iotx.exchange import Exchange
from iotx.identity import local_resolver, parse_did
from iotx.keystore import KeyStore
from iotx.policy import (
    AccessRequestDraft,
    AuthorizingParty,
    DenyPolicy,
    FilterSpecEntry,
    OwnerPolicy,
    owner_issue_flow,
)
from iotx.timefmt import format_timestamp, parse_timestamp

START = parse_timestamp("2019-10-01T00:00:00Z")


def show(title: str, value=None) -> None:
    print(f"\n== {title}")
    if value is not None:
        print(json.dumps(value, indent=2, sort_keys=True))


def participant(resolver, when):
    signer = LocalSigner()
    doc = resolver.create_did("iotx", signer.public_key, [], signer, when)
    return str(doc.id), signer


def main() -> None:
    clock = ManualClock(START - 3600)
    resolver = local_resolver()
    keystore = KeyStore(clock=clock)
    fleet = Fleet()
    exchange = Exchange(resolver, keystore, clock=clock, gateway=fleet)

    owner, owner_key = participant(resolver, clock.now())
    customer, _ = participant(resolver, clock.now())
    show("participants", {"owner": owner, "customer": customer})

    devices = []
    for i, eui in enumerate(["A81758FFFE03AB40", "A81758FFFE03AB41", "A81758FFFE03AB42"]):
        reg = exchange.register_device(owner, "LoRaDeviceEUI", eui, f"SN-{i}")
        mapping = keystore.lookup_by("did", reg.did)
        fleet.add(SimDevice(Profile.LORA_TEMP_LOCATION, eui, mapping.key_handle, 900, rng_seed=i, did=reg.did))
        devices.append(reg.did)
    show("device DID document", exchange.resolve(devices[0]).to_dict())

    policy = OwnerPolicy(filter_spec=(
        FilterSpecEntry(frozenset(devices), ("redact_location", "redact_device_id")),
    ))
    exchange.publish_policy(owner, policy)

    draft = AccessRequestDraft.from_dict({
        "customerDid": customer, "deviceIds": devices,
        "start": "2019-10-01:00:00:00", "end": "2019-10-30:23:59:59",
        "period": "06:00:00", "permissions": ["data"],
    })
    vc = owner_issue_flow(draft, policy, exchange, resolver, owner_key, owner, clock=clock)
    show("credential issued by the owner", vc.to_dict())

    grant = exchange.present_credential(vc)
    show("grant activated at the exchange", grant.summary())

    report = run_fleet(fleet, 12 * 3600, clock, keystore, exchange.ingest_telemetry)
    show(f"fleet emitted {report.total} signed records; clock now {format_timestamp(clock.now())}")

    rows = exchange.access_data(customer, vc.vc_id, devices[0])
    show(f"customer fetch returned {len(rows)} records; first one", rows[0].to_dict())

    try:
        exchange.access_data(customer, vc.vc_id, devices[0])
    except IotxError as exc:
        show(f"second fetch in the same period is refused: {exc.reason}", exc.to_dict())

    try:
        exchange.present_credential(vc)
    except IotxError as exc:
        show(f"presenting the credential again is refused: {exc.reason}", exc.to_dict())

    regulator, regulator_key = participant(resolver, clock.now())
    party = AuthorizingParty(parse_did(regulator), regulator_key, DenyPolicy(frozenset({customer})))
    strict = OwnerPolicy(filter_spec=policy.filter_spec, authorizing_parties=(regulator,))
    try:
        owner_issue_flow(draft, strict, exchange, resolver, owner_key, owner, [party], clock)
    except IotxError as exc:
        show(f"an authorizing party on the deny path stops issuance: {exc.reason}", exc.to_dict())


if __name__ == "__main__":
    main()
