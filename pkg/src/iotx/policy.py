"""Owner-side issuance of access credentials.

The owner keeps three things: the DIDs that may see unfiltered traffic
(``privacyExemptList``), which privacy filters run for which devices
(``filterSpec``), and per-device capacity. Authorizing parties each keep a
deny list; a customer on any of them never gets a credential.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .clock import Clock, SystemClock
from .credential import (
    PERMISSIONS,
    AccessRequestSubject,
    Endorsement,
    VerifiableCredential,
    check_window,
    parse_period,
    parse_timestamp,
    sign_credential,
)
from .crypto import Signer
from .errors import (
    CapacityExceeded,
    CustomerUnresolvable,
    DeviceUnresolvable,
    ExchangeUnavailable,
    IotxError,
    MalformedDid,
    MalformedPeriod,
    MalformedTimestamp,
    PartyUnavailable,
    PolicyDenied,
    PolicyInvalid,
    SubjectInvalid,
)
from .identity import Did, parse_did
from .privacy import DEFAULT_REGISTRY, FilterRegistry

DEFAULT_CAPACITY = 16


def _did_set(values: Any, what: str) -> frozenset[str]:
    if not isinstance(values, (list, tuple, set, frozenset)):
        raise PolicyInvalid(f"{what} must be a list of DIDs")
    try:
        return frozenset(str(parse_did(v)) for v in values)
    except MalformedDid as exc:
        raise PolicyInvalid(f"{what}: {exc}") from exc


@dataclass(frozen=True)
class FilterSpecEntry:
    device_ids: frozenset[str]
    filter_chain: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"deviceIds": sorted(self.device_ids), "filterChain": list(self.filter_chain)}


@dataclass(frozen=True)
class OwnerPolicy:
    privacy_exempt: frozenset[str] = frozenset()
    filter_spec: tuple[FilterSpecEntry, ...] = ()
    device_capacity: Mapping[str, int] = field(default_factory=dict)
    authorizing_parties: tuple[str, ...] = ()
    default_capacity: int = DEFAULT_CAPACITY

    def validate(self, registry: FilterRegistry = DEFAULT_REGISTRY) -> "OwnerPolicy":
        for entry in self.filter_spec:
            for name in entry.filter_chain:
                if name not in registry:
                    raise PolicyInvalid(f"unknown filter {name!r} in filterSpec")
        for did, cap in self.device_capacity.items():
            if isinstance(cap, bool) or not isinstance(cap, int) or cap < 1:
                raise PolicyInvalid(f"capacity for {did} must be an integer >= 1")
        return self

    def capacity(self, device: Did | str) -> int:
        return self.device_capacity.get(str(device), self.default_capacity)

    def to_dict(self) -> dict:
        return {
            "privacyExemptList": sorted(self.privacy_exempt),
            "filterSpec": [e.to_dict() for e in self.filter_spec],
            "deviceCapacity": dict(self.device_capacity),
            "authorizingParties": list(self.authorizing_parties),
        }

    @classmethod
    def from_dict(cls, data: Mapping, registry: FilterRegistry = DEFAULT_REGISTRY) -> "OwnerPolicy":
        if not isinstance(data, Mapping):
            raise PolicyInvalid("policy must be a JSON object")
        unknown = set(data) - {"privacyExemptList", "filterSpec", "deviceCapacity", "authorizingParties"}
        if unknown:
            raise PolicyInvalid(f"unknown policy keys {sorted(unknown)}")
        entries = []
        for e in data.get("filterSpec", []):
            try:
                chain = tuple(e["filterChain"])
                ids = _did_set(e["deviceIds"], "filterSpec.deviceIds")
            except (KeyError, TypeError) as exc:
                raise PolicyInvalid(f"bad filterSpec entry {e!r}") from exc
            entries.append(FilterSpecEntry(ids, chain))
        capacity = data.get("deviceCapacity", {})
        if not isinstance(capacity, Mapping):
            raise PolicyInvalid("deviceCapacity must be an object")
        parties = data.get("authorizingParties", [])
        _did_set(parties, "authorizingParties")
        policy = cls(
            privacy_exempt=_did_set(data.get("privacyExemptList", []), "privacyExemptList"),
            filter_spec=tuple(entries),
            device_capacity={str(parse_did(k)): v for k, v in capacity.items()},
            authorizing_parties=tuple(parties),
        )
        return policy.validate(registry)

    @classmethod
    def from_file(cls, path: str | Path, registry: FilterRegistry = DEFAULT_REGISTRY) -> "OwnerPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()), registry)


@dataclass(frozen=True)
class DenyPolicy:
    denied_dids: frozenset[str] = frozenset()

    def denies(self, did: Did | str) -> bool:
        return str(did) in self.denied_dids

    @classmethod
    def from_dict(cls, data: Mapping) -> "DenyPolicy":
        return cls(_did_set(data.get("deniedDids", []), "deniedDids"))

    @classmethod
    def from_file(cls, path: str | Path) -> "DenyPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class AccessRequestDraft:
    """What a customer asks for. Times keep their original text form."""

    customer_did: Did
    device_ids: tuple[Did, ...]
    start: str
    end: str
    period: str
    permissions: tuple[str, ...]

    def validate(self) -> None:
        try:
            check_window(parse_timestamp(self.start), parse_timestamp(self.end), parse_period(self.period))
        except (MalformedTimestamp, MalformedPeriod) as exc:
            raise SubjectInvalid(str(exc)) from exc
        if not self.device_ids or len(set(self.device_ids)) != len(self.device_ids):
            raise SubjectInvalid("deviceIds must be nonempty and distinct")
        if not self.permissions or not set(self.permissions) <= PERMISSIONS:
            raise SubjectInvalid("permissions must be a nonempty subset of data, control")

    def to_dict(self) -> dict:
        return {
            "customerDid": str(self.customer_did),
            "deviceIds": [str(d) for d in self.device_ids],
            "start": self.start,
            "end": self.end,
            "period": self.period,
            "permissions": list(self.permissions),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AccessRequestDraft":
        try:
            return cls(
                customer_did=parse_did(data["customerDid"]),
                device_ids=tuple(parse_did(d) for d in data["deviceIds"]),
                start=data["start"],
                end=data["end"],
                period=data["period"],
                permissions=tuple(data["permissions"]),
            )
        except (KeyError, TypeError, MalformedDid) as exc:
            raise SubjectInvalid(f"bad access request: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "AccessRequestDraft":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AuthorizingParty:
    did: Did
    signer: Signer
    deny: DenyPolicy = field(default_factory=DenyPolicy)


def endorse(party: AuthorizingParty, terms: VerifiableCredential) -> Endorsement:
    """Sign the credential terms unless the customer is on the party's deny list."""
    if party.deny.denies(terms.subject.id):
        raise PolicyDenied(str(party.did))
    return Endorsement(party.did, party.signer.sign(terms.endorsement_payload()))


def filter_chain_for(device_id: Did | str, policy: OwnerPolicy) -> list[str]:
    device = str(device_id)
    chain: list[str] = []
    for entry in policy.filter_spec:
        if device in entry.device_ids:
            chain.extend(entry.filter_chain)
    return chain


class ExchangeClient(Protocol):
    def issue_vc_id(self, owner_did: Did | str) -> str: ...

    def active_grants(self, device_did: Did | str) -> int: ...


def _call_exchange(fn, *args, step: int):
    try:
        return fn(*args)
    except IotxError as exc:
        if exc.step is None:
            exc.step = step
        raise
    except (OSError, ConnectionError) as exc:
        raise ExchangeUnavailable(str(exc), step=step) from exc


def owner_issue_flow(
    draft: AccessRequestDraft,
    policy: OwnerPolicy,
    exchange: ExchangeClient,
    resolver,
    signer: Signer,
    issuer: Did | str,
    parties: Mapping[str, AuthorizingParty] | Iterable[AuthorizingParty] = (),
    clock: Clock | None = None,
) -> VerifiableCredential:
    """Run the owner's issuance steps in order; raise on the first failing one.

    Steps: (1) resolve customer and devices, (2) capacity, (3) privacy flag,
    (4) vcId from the exchange, (5) endorsements, (6) sign.
    """
    draft.validate()
    if not isinstance(parties, Mapping):
        parties = {str(p.did): p for p in parties}
    clock = clock or SystemClock()

    if not resolver.resolvable(draft.customer_did):
        raise CustomerUnresolvable(str(draft.customer_did), step=1)
    for device in draft.device_ids:
        if not resolver.resolvable(device):
            raise DeviceUnresolvable(str(device), step=1)

    for device in draft.device_ids:
        active = _call_exchange(exchange.active_grants, device, step=2)
        if active + 1 > policy.capacity(device):
            raise CapacityExceeded(str(device), step=2)

    privacy = str(draft.customer_did) not in policy.privacy_exempt

    vc_id = _call_exchange(exchange.issue_vc_id, issuer, step=4)

    terms = VerifiableCredential(
        vc_id=vc_id,
        issuer=parse_did(issuer),
        issuance_date=clock.now(),
        subject=AccessRequestSubject.create(
            draft.customer_did, draft.device_ids, draft.start, draft.end,
            draft.period, draft.permissions, privacy,
        ),
    )
    endorsements = []
    for party_did in policy.authorizing_parties:
        party = parties.get(str(party_did))
        if party is None:
            raise PartyUnavailable(str(party_did), step=5)
        try:
            endorsements.append(endorse(party, terms))
        except PolicyDenied as exc:
            exc.step = 5
            raise
    terms = VerifiableCredential(
        terms.vc_id, terms.issuer, terms.issuance_date, terms.subject, tuple(endorsements)
    )
    return sign_credential(terms, signer, resolver)


class OwnerAgent:
    """Serializes issuance and policy reloads for one owner."""

    def __init__(self, did: Did | str, signer: Signer, policy: OwnerPolicy, exchange: ExchangeClient,
                 resolver, parties: Sequence[AuthorizingParty] = (), clock: Clock | None = None):
        self.did = parse_did(did)
        self.signer = signer
        self.policy = policy
        self.exchange = exchange
        self.resolver = resolver
        self.parties = {str(p.did): p for p in parties}
        self.clock = clock
        self._lock = threading.Lock()

    def set_policy(self, policy: OwnerPolicy) -> None:
        with self._lock:
            self.policy = policy

    def issue(self, draft: AccessRequestDraft) -> VerifiableCredential:
        with self._lock:
            return owner_issue_flow(draft, self.policy, self.exchange, self.resolver,
                                    self.signer, self.did, self.parties, self.clock)
