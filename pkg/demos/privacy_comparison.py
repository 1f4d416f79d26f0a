"""Show the same telemetry through two grants: one privacy-preserving, one exempt.

The owner's exempt list decides which view a customer gets; the filter
chain comes from the owner's filter spec.

    python3 demos/privacy_comparison.py
"""

from __future__ import annotations

from iotx.clock import ManualClock
from iotx.crypto import LocalSigner
from iotx.devicesim import Fleet, Profile, SimDevice, run_fleet
from iotx.exchange import Exchange
from iotx.identity import local_resolver
from iotx.keystore import KeyStore
from iotx.policy import AccessRequestDraft, FilterSpecEntry, OwnerPolicy, owner_issue_flow
from iotx.timefmt import format_timestamp, parse_timestamp

START = parse_timestamp("2019-10-01T00:00:00Z")


def participant(resolver, when):
    signer = LocalSigner()
    return str(resolver.create_did("iotx", signer.public_key, [], signer, when).id), signer


def main() -> None:
    clock = ManualClock(START)
    resolver, keystore, fleet = local_resolver(), KeyStore(clock=clock), Fleet()
    exchange = Exchange(resolver, keystore, clock=clock, gateway=fleet)
    owner, owner_key = participant(resolver, START)
    analyst, _ = participant(resolver, START)
    maintainer, _ = participant(resolver, START)

    reg = exchange.register_device(owner, "LoRaDeviceEUI", "A81758FFFE03AB42", "SN-1")
    handle = keystore.lookup_by("did", reg.did).key_handle
    fleet.add(SimDevice(Profile.LORA_TEMP_LOCATION, reg.connectivity_id, handle, 600, rng_seed=7, did=reg.did))

    policy = OwnerPolicy(
        privacy_exempt=frozenset({maintainer}),
        filter_spec=(FilterSpecEntry(frozenset({reg.did}), ("redact_location", "redact_device_id")),),
    )
    exchange.publish_policy(owner, policy)

    grants = {}
    for name, who in (("analyst", analyst), ("maintainer", maintainer)):
        draft = AccessRequestDraft.from_dict({
            "customerDid": who, "deviceIds": [reg.did], "start": "2019-10-01:00:00:00",
            "end": "2019-10-30:23:59:59", "period": "01:00:00", "permissions": ["data"],
        })
        vc = owner_issue_flow(draft, policy, exchange, resolver, owner_key, owner, clock=clock)
        exchange.present_credential(vc)
        grants[name] = (who, vc.vc_id, vc.subject.privacy_preserving)

    run_fleet(fleet, 3600, clock, keystore, exchange.ingest_telemetry)

    views = {name: exchange.access_data(who, vc_id, reg.did) for name, (who, vc_id, _) in grants.items()}
    for name, (_, _, private) in grants.items():
        print(f"{name}: privacyPreserving={str(private).lower()}")
    columns = ["temp", "lat", "lon", "loraId"]
    print()
    print(f"{'time':<21}{'view':<12}" + "".join(f"{c:<20}" for c in columns))
    for a, m in zip(views["analyst"], views["maintainer"]):
        for name, row in (("analyst", a), ("maintainer", m)):
            print(f"{format_timestamp(row.timestamp):<21}{name:<12}"
                  + "".join(f"{str(row.fields[c]):<20}" for c in columns))


if __name__ == "__main__":
    main()
