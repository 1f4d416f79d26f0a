"""The exchange service: device registration, the vcId ledger, credential
presentation and grant activation, gated data/control access, telemetry
ingestion and dispatch through privacy filter chains.

All enforcement reads a single injectable clock. Ledger consumption, grant
counters and last-access bookkeeping happen under one lock so concurrent
presentations of the same credential admit exactly one winner.
"""

from __future__ import annotations

import secrets
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Protocol

from .clock import Clock, SystemClock
from .credential import VALID, VerifiableCredential, verify_credential
from .crypto import verify
from .errors import (
    CapacityExceeded,
    ClockSkew,
    DeviceNotInGrant,
    DuplicateConnectivityId,
    DuplicateIdentity,
    GrantNotActive,
    IotxError,
    NonMonotoneTimestamp,
    NotFound,
    NotGrantee,
    OutsideWindow,
    OwnerUnresolvable,
    PeriodNotElapsed,
    PermissionDenied,
    SignatureInvalid,
    UnknownDevice,
    UnknownVcId,
    VcIdAlreadyUsed,
    VcIdIssuerMismatch,
    VerificationFailed,
)
from .identity import Did, DidDocument, Resolver, build_document, check_connectivity, parse_did
from .keystore import IdentityMapping, KeyStore
from .policy import DEFAULT_CAPACITY, OwnerPolicy, filter_chain_for
from .privacy import DEFAULT_REGISTRY, FilterRegistry
from .storage import EdgeStore, MemoryEdgeStore
from .telemetry import SignedRecord, TelemetryRecord
from .timefmt import format_period, format_timestamp


@dataclass(frozen=True)
class DeviceRegistration:
    did: str
    connectivity_type: str
    connectivity_id: str
    owner_did: str
    registered_at: int

    def to_dict(self) -> dict:
        return {
            "did": self.did,
            "connectivityType": self.connectivity_type,
            "connectivityId": self.connectivity_id,
            "ownerDid": self.owner_did,
            "registeredAt": format_timestamp(self.registered_at),
        }


@dataclass
class VcIdLedgerEntry:
    vc_id: str
    issued_to: str
    issued_at: int
    consumed: bool = False


class GrantState(str, Enum):
    ACTIVE = "Active"
    EXPIRED = "Expired"


@dataclass
class AccessGrant:
    vc_id: str
    customer_did: str
    device_ids: tuple[str, ...]
    start: int
    end: int
    period: int
    permissions: frozenset[str]
    privacy_preserving: bool
    filter_chains: dict[str, list[str]] = field(default_factory=dict)
    last_access: dict[str, int | None] = field(default_factory=dict)
    last_control: dict[str, int | None] = field(default_factory=dict)
    state: GrantState = GrantState.ACTIVE

    def summary(self) -> dict:
        return {
            "vcId": self.vc_id,
            "customerDid": self.customer_did,
            "deviceIds": list(self.device_ids),
            "start": format_timestamp(self.start),
            "end": format_timestamp(self.end),
            "period": format_period(self.period),
            "permissions": sorted(self.permissions),
            "privacyPreserving": self.privacy_preserving,
            "filterChains": {k: list(v) for k, v in self.filter_chains.items()},
            "state": self.state.value,
        }


class DeviceGateway(Protocol):
    """Where grant notices and filtered control commands are pushed."""

    def notify_grant(self, device_did: str, grant: Mapping[str, Any]) -> None: ...

    def deliver_command(self, device_did: str, command: Mapping[str, Any]) -> None: ...


class QueueGateway:
    """Keeps per-device queues; devices (or tests) drain them."""

    def __init__(self):
        self.commands: dict[str, deque] = defaultdict(deque)
        self.notices: dict[str, deque] = defaultdict(deque)
        self._lock = threading.Lock()

    def notify_grant(self, device_did: str, grant: Mapping[str, Any]) -> None:
        with self._lock:
            self.notices[device_did].append(dict(grant))

    def deliver_command(self, device_did: str, command: Mapping[str, Any]) -> None:
        with self._lock:
            self.commands[device_did].append(dict(command))

    def drain(self, device_did: str) -> list[dict]:
        with self._lock:
            out = list(self.commands[device_did])
            self.commands[device_did].clear()
            return out


class Exchange:
    def __init__(
        self,
        resolver: Resolver,
        keystore: KeyStore,
        store: EdgeStore | None = None,
        clock: Clock | None = None,
        registry: FilterRegistry = DEFAULT_REGISTRY,
        default_capacity: int = DEFAULT_CAPACITY,
        gateway: DeviceGateway | None = None,
        did_method: str = "iotx",
    ):
        self.resolver = resolver
        self.keystore = keystore
        self.store = store if store is not None else MemoryEdgeStore()
        self.clock = clock or SystemClock()
        self.registry = registry
        self.default_capacity = default_capacity
        self.gateway = gateway if gateway is not None else QueueGateway()
        self.did_method = did_method
        self._registrations: dict[str, DeviceRegistration] = {}
        self._by_connectivity: dict[tuple[str, str], str] = {}
        self._ledger: dict[str, VcIdLedgerEntry] = {}
        self._grants: dict[str, AccessGrant] = {}
        self._policies: dict[str, OwnerPolicy] = {}
        self._lock = threading.RLock()
        self._device_locks: dict[str, threading.Lock] = {}

    # registration

    def register_device(
        self,
        owner_did: Did | str,
        connectivity_type: str,
        connectivity_id: str,
        device_unique_id: str,
        cloud_key_slot: str | None = None,
    ) -> DeviceRegistration:
        """Enroll the connectivity identifier, then mint a DID bound to it.

        Either every artifact (key, identity mapping, DID document,
        registration) is committed or none is.
        """
        check_connectivity(connectivity_type, connectivity_id)
        owner = str(parse_did(owner_did))
        if not self.resolver.resolvable(owner):
            raise OwnerUnresolvable(owner)
        with self._lock:
            if (connectivity_type, connectivity_id) in self._by_connectivity:
                raise DuplicateConnectivityId(connectivity_id)
            for name, value in (("connectivityId", connectivity_id), ("deviceUniqueId", device_unique_id)):
                try:
                    self.keystore.lookup_by(name, value)
                except NotFound:
                    continue
                if name == "connectivityId":
                    raise DuplicateConnectivityId(connectivity_id)
                raise DuplicateIdentity(f"deviceUniqueId {device_unique_id!r} already registered")

            record = self.keystore.generate_key()
            mapped = False
            try:
                doc = build_document(
                    self.did_method,
                    record.public_key,
                    [(connectivity_type, connectivity_id)],
                    self.keystore.signer(record.key_handle),
                    self.clock.now(),
                )
                mapping = IdentityMapping(
                    device_unique_id, str(doc.id), connectivity_id, record.key_handle, cloud_key_slot
                )
                self.keystore.map_identity(mapping)
                mapped = True
                self.resolver.publish(doc)
            except BaseException:
                if mapped:
                    self.keystore.unmap_identity(device_unique_id)
                self.keystore.forget_key(record.key_handle)
                raise

            reg = DeviceRegistration(str(doc.id), connectivity_type, connectivity_id, owner, self.clock.now())
            self._registrations[reg.did] = reg
            self._by_connectivity[(connectivity_type, connectivity_id)] = reg.did
            return reg

    def registration(self, device_did: Did | str) -> DeviceRegistration:
        try:
            return self._registrations[str(device_did)]
        except KeyError:
            raise UnknownDevice(str(device_did)) from None

    def resolve(self, did: Did | str) -> DidDocument:
        return self.resolver.resolve(did)

    def publish_policy(self, owner_did: Did | str, policy: OwnerPolicy) -> None:
        """Record an owner's filter spec and capacities for use at presentation."""
        policy.validate(self.registry)
        with self._lock:
            self._policies[str(parse_did(owner_did))] = policy

    def owner_policy(self, owner_did: Did | str) -> OwnerPolicy | None:
        return self._policies.get(str(owner_did))

    # vcId ledger

    def issue_vc_id(self, owner_did: Did | str) -> str:
        owner = str(parse_did(owner_did))
        if not self.resolver.resolvable(owner):
            raise OwnerUnresolvable(owner)
        with self._lock:
            vc_id = secrets.token_hex(16)
            while vc_id in self._ledger:
                vc_id = secrets.token_hex(16)
            self._ledger[vc_id] = VcIdLedgerEntry(vc_id, owner, self.clock.now())
            return vc_id

    def ledger_entry(self, vc_id: str) -> VcIdLedgerEntry:
        try:
            return self._ledger[vc_id]
        except KeyError:
            raise UnknownVcId(vc_id) from None

    # grants

    def _capacity(self, device_did: str) -> int:
        reg = self._registrations[device_did]
        policy = self._policies.get(reg.owner_did)
        if policy is not None and device_did in policy.device_capacity:
            return policy.device_capacity[device_did]
        return self.default_capacity

    def active_grants(self, device_did: Did | str) -> int:
        device = str(device_did)
        with self._lock:
            self._expire_locked(self.clock.now())
            return sum(
                1 for g in self._grants.values()
                if g.state is GrantState.ACTIVE and device in g.device_ids
            )

    def present_credential(self, vc: VerifiableCredential) -> AccessGrant:
        """Verify a credential, consume its vcId and activate a grant.

        Steps: (1) verification, (2) ledger check and consumption,
        (3) capacity and device programming, (4) filter pipeline,
        (5) ready notification. The vcId stays consumed if step 3 fails.
        """
        verdict = verify_credential(vc, self.resolver)
        if verdict != VALID:
            raise VerificationFailed(verdict, step=1)
        subject = vc.subject
        if not self.resolver.resolvable(subject.id):
            raise VerificationFailed("CustomerUnresolvable", step=1)
        devices = tuple(str(d) for d in subject.device_ids)
        for d in devices:
            reg = self._registrations.get(d)
            if reg is None:
                raise VerificationFailed("DeviceNotRegistered", step=1)
            if reg.owner_did != str(vc.issuer):
                raise VerificationFailed("NotDeviceOwner", step=1)

        with self._lock:
            entry = self._ledger.get(vc.vc_id)
            if entry is None:
                raise UnknownVcId(vc.vc_id, step=2)
            if entry.issued_to != str(vc.issuer):
                raise VcIdIssuerMismatch(vc.vc_id, step=2)
            if entry.consumed:
                raise VcIdAlreadyUsed(vc.vc_id, step=2)
            entry.consumed = True

            now = self.clock.now()
            if subject.end_epoch < now:
                raise OutsideWindow("credential window already ended", step=3)
            self._expire_locked(now)
            for d in devices:
                active = sum(
                    1 for g in self._grants.values()
                    if g.state is GrantState.ACTIVE and d in g.device_ids
                )
                if active + 1 > self._capacity(d):
                    raise CapacityExceeded(d, step=3)

            chains: dict[str, list[str]] = {}
            if subject.privacy_preserving:
                for d in devices:
                    policy = self._policies.get(self._registrations[d].owner_did)
                    chains[d] = filter_chain_for(d, policy) if policy else []
            grant = AccessGrant(
                vc_id=vc.vc_id,
                customer_did=str(subject.id),
                device_ids=devices,
                start=subject.start_epoch,
                end=subject.end_epoch,
                period=subject.period_seconds,
                permissions=frozenset(subject.permissions),
                privacy_preserving=subject.privacy_preserving,
                filter_chains=chains,
                last_access={d: None for d in devices},
                last_control={d: None for d in devices},
            )
            self._grants[vc.vc_id] = grant

        summary = grant.summary()
        for d in devices:
            self.gateway.notify_grant(d, summary)
        return grant

    def grant(self, vc_id: str) -> AccessGrant:
        try:
            return self._grants[vc_id]
        except KeyError:
            raise UnknownVcId(vc_id) from None

    def grants(self) -> list[AccessGrant]:
        return list(self._grants.values())

    def _expire_locked(self, now: int) -> int:
        count = 0
        for g in self._grants.values():
            if g.state is GrantState.ACTIVE and g.end < now:
                g.state = GrantState.EXPIRED
                count += 1
        return count

    def expire_grants(self, now: int | None = None) -> int:
        with self._lock:
            return self._expire_locked(self.clock.now() if now is None else now)

    def _gate(self, customer_did, vc_id: str, device_did, as_of: int | None,
              permission: str) -> tuple[AccessGrant, str, int, int | None]:
        device = str(device_did)
        with self._lock:
            grant = self._grants.get(vc_id)
            if grant is None:
                raise UnknownVcId(vc_id)
            if str(customer_did) != grant.customer_did:
                raise NotGrantee(str(customer_did))
            now = self.clock.now()
            as_of = now if as_of is None else int(as_of)
            if as_of > now:
                raise ClockSkew(f"asOf {format_timestamp(as_of)} is ahead of the exchange clock")
            if device not in grant.device_ids:
                raise DeviceNotInGrant(device)
            if permission not in grant.permissions:
                raise PermissionDenied(f"grant lacks {permission!r} permission")
            # window before state, so a lapsed grant reads the same whether or
            # not an expiry sweep has run yet
            if not grant.start <= as_of <= grant.end:
                raise OutsideWindow(format_timestamp(as_of))
            if grant.state is not GrantState.ACTIVE:
                raise GrantNotActive(vc_id)
            book = grant.last_access if permission == "data" else grant.last_control
            previous = book.get(device)
            if previous is not None and as_of - previous < grant.period:
                raise PeriodNotElapsed(f"next access at {format_timestamp(previous + grant.period)}")
            book[device] = as_of
            return grant, device, as_of, previous

    def access_data(self, customer_did: Did | str, vc_id: str, device_did: Did | str,
                    as_of: int | None = None) -> list[TelemetryRecord]:
        grant, device, as_of, previous = self._gate(customer_did, vc_id, device_did, as_of, "data")
        if previous is None:
            rows = self.store.scan(device, since=grant.start, until=as_of)
        else:
            rows = self.store.scan(device, after=previous, until=as_of)
        chain = grant.filter_chains.get(device, [])
        return [self.registry.apply_chain(chain, r) for r in rows]

    def access_control(self, customer_did: Did | str, vc_id: str, device_did: Did | str,
                       command: Mapping[str, Any], as_of: int | None = None) -> dict:
        """Gate, pre-process and deliver a control command; returns what was delivered."""
        grant, device, as_of, _ = self._gate(customer_did, vc_id, device_did, as_of, "control")
        record = TelemetryRecord(device, as_of, dict(command))
        filtered = self.registry.apply_chain(grant.filter_chains.get(device, []), record)
        delivered = dict(filtered.fields)
        self.gateway.deliver_command(device, delivered)
        return delivered

    # ingestion

    def ingest_telemetry(self, connectivity_id: str, signed: SignedRecord) -> TelemetryRecord:
        try:
            mapping = self.keystore.lookup_by("connectivityId", connectivity_id)
        except NotFound:
            raise UnknownDevice(connectivity_id) from None
        record = signed.record
        if record.device_did != mapping.did:
            raise SignatureInvalid("record names a different device")
        try:
            public_key = self.resolver.resolve(mapping.did).public_key
        except IotxError as exc:
            raise UnknownDevice(mapping.did) from exc
        if not verify(public_key, record.payload(), signed.signature):
            raise SignatureInvalid(connectivity_id)
        with self._device_locks.setdefault(mapping.did, threading.Lock()):
            latest = self.store.latest(mapping.did)
            if latest is not None and record.timestamp < latest:
                raise NonMonotoneTimestamp(
                    f"{format_timestamp(record.timestamp)} precedes {format_timestamp(latest)}"
                )
            self.store.put(record)
        return record
