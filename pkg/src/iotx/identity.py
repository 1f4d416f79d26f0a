"""Decentralized identifiers, DID documents, method-plugin resolution and
the Identity Hub document store."""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .canonical import canonicalize
from .crypto import PUBLIC_KEY_SIZE, VERIFICATION_METHOD, Signer, verify
from .errors import (
    DuplicateServiceType,
    IdBindingInvalid,
    MalformedDid,
    NotFound,
    ProofInvalid,
    ServiceSyntaxError,
    SignerMismatch,
    UnknownConnectivityType,
    UnknownMethod,
    UpdateUnauthorized,
)
from .timefmt import format_timestamp, parse_timestamp

_METHOD = r"[a-z0-9]+"
_IDCHAR = r"[A-Za-z0-9._%-]"
_DID_RE = re.compile(rf"^did:({_METHOD}):({_IDCHAR}+(?::{_IDCHAR}+)*)$")

_MAC = re.compile(r"^[0-9a-fA-F]{2}(?::[0-9a-fA-F]{2}){5}$")
_EUI64 = re.compile(r"^[0-9a-fA-F]{16}$")

CONNECTIVITY_TYPES: Mapping[str, re.Pattern] = MappingProxyType(
    {
        "EthernetMacAddress": _MAC,
        "WiFiMacAddress": _MAC,
        "LoRaDeviceEUI": _EUI64,
    }
)


@dataclass(frozen=True)
class Did:
    method: str
    method_specific_id: str

    def __str__(self) -> str:
        return f"did:{self.method}:{self.method_specific_id}"


def parse_did(text: str | Did) -> Did:
    if isinstance(text, Did):
        return text
    if not isinstance(text, str):
        raise MalformedDid(repr(text))
    m = _DID_RE.match(text)
    if not m:
        raise MalformedDid(text)
    return Did(m.group(1), m.group(2))


def check_connectivity(type_: str, endpoint: str) -> None:
    """Raise unless ``endpoint`` is valid syntax for connectivity ``type_``."""
    rule = CONNECTIVITY_TYPES.get(type_)
    if rule is None:
        raise UnknownConnectivityType(type_)
    if not isinstance(endpoint, str) or not rule.match(endpoint):
        raise ServiceSyntaxError(f"{endpoint!r} is not a valid {type_}")


@dataclass(frozen=True)
class ServiceEntry:
    type: str
    service_endpoint: str
    id: Did | None = None

    def to_dict(self) -> dict:
        return {"id": str(self.id), "type": self.type, "serviceEndpoint": self.service_endpoint}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ServiceEntry":
        try:
            sid = parse_did(data["id"]) if "id" in data else None
            return cls(type=data["type"], service_endpoint=data["serviceEndpoint"], id=sid)
        except (KeyError, TypeError) as exc:
            raise ServiceSyntaxError(f"bad service entry {data!r}") from exc


def _validate_services(did: Did | None, services: Iterable[ServiceEntry]) -> None:
    seen: set[str] = set()
    for s in services:
        check_connectivity(s.type, s.service_endpoint)
        if s.type in seen:
            raise DuplicateServiceType(s.type)
        seen.add(s.type)
        if did is not None and s.id is not None and s.id != did:
            raise ServiceSyntaxError(f"service id {s.id} does not match document {did}")


def derive_method_specific_id(public_key: bytes, created: int) -> str:
    digest = hashlib.sha256(public_key + format_timestamp(created).encode("ascii")).digest()
    return digest[:16].hex()


def _hex_field(data: Mapping[str, Any], key: str, size: int | None = None) -> bytes:
    value = data.get(key)
    if not isinstance(value, str) or value != value.lower():
        raise ProofInvalid(f"{key} must be lowercase hex")
    try:
        raw = bytes.fromhex(value)
    except ValueError as exc:
        raise ProofInvalid(f"{key} is not hex") from exc
    if size is not None and len(raw) != size:
        raise ProofInvalid(f"{key} must be {size} bytes")
    return raw


@dataclass(frozen=True)
class DidDocument:
    id: Did
    public_key: bytes
    services: tuple[ServiceEntry, ...] = ()
    created: int = 0
    verification_method: str = VERIFICATION_METHOD
    proof: bytes = b""

    def to_dict(self, include_proof: bool = True) -> dict:
        out = {
            "id": str(self.id),
            "publicKey": self.public_key.hex(),
            "verificationMethod": self.verification_method,
            "services": [s.to_dict() for s in self.services],
            "created": format_timestamp(self.created),
        }
        if include_proof:
            out["proof"] = self.proof.hex()
        return out

    def payload(self) -> bytes:
        return canonicalize(self.to_dict(include_proof=False))

    def canonical(self) -> bytes:
        return canonicalize(self.to_dict())

    def proof_valid(self, public_key: bytes | None = None) -> bool:
        return verify(public_key or self.public_key, self.payload(), self.proof)

    def service(self, type_: str) -> ServiceEntry | None:
        return next((s for s in self.services if s.type == type_), None)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DidDocument":
        expected = {"id", "publicKey", "verificationMethod", "services", "created", "proof"}
        if not isinstance(data, Mapping) or set(data) != expected:
            raise ProofInvalid("DID document must carry exactly the fields " + ", ".join(sorted(expected)))
        did = parse_did(data["id"])
        if not isinstance(data["services"], list):
            raise ServiceSyntaxError("services must be a list")
        services = tuple(ServiceEntry.from_dict(s) for s in data["services"])
        for s in services:
            if s.id != did:
                raise ServiceSyntaxError(f"service id {s.id} does not match document {did}")
        _validate_services(did, services)
        if data["verificationMethod"] != VERIFICATION_METHOD:
            raise ProofInvalid(f"unsupported verification method {data['verificationMethod']!r}")
        return cls(
            id=did,
            public_key=_hex_field(data, "publicKey", PUBLIC_KEY_SIZE),
            services=services,
            created=parse_timestamp(data["created"]),
            verification_method=data["verificationMethod"],
            proof=_hex_field(data, "proof"),
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> "DidDocument":
        return cls.from_dict(json.loads(text))


def build_document(
    method: str,
    public_key: bytes,
    services: Sequence[ServiceEntry | tuple[str, str]],
    signer: Signer,
    created: int,
) -> DidDocument:
    """Assemble and self-sign a new document without storing it."""
    if len(public_key) != PUBLIC_KEY_SIZE:
        raise ValueError("public key must be 32 bytes")
    if signer.public_key != public_key:
        raise SignerMismatch("signer does not hold the document key")
    did = Did(method, derive_method_specific_id(public_key, created))
    entries = []
    for s in services:
        if isinstance(s, tuple):
            s = ServiceEntry(*s)
        entries.append(replace(s, id=did))
    _validate_services(did, entries)
    doc = DidDocument(id=did, public_key=public_key, services=tuple(entries), created=created)
    return replace(doc, proof=signer.sign(doc.payload()))


class IdentityHub:
    """Document store keyed by DID text, keeping every revision.

    Updates must be signed by the key already on record and may not change
    that key. With ``path`` set, each accepted revision is appended to the
    file as one canonical JSON line and replayed on construction.
    """

    def __init__(self, path: str | Path | None = None):
        self._revisions: dict[str, list[DidDocument]] = {}
        self._lock = threading.Lock()
        self._path = Path(path) if path else None
        if self._path and self._path.exists():
            with self._path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._accept(DidDocument.from_json(line), persist=False)

    def store(self, doc: DidDocument) -> str:
        with self._lock:
            return self._accept(doc, persist=True)

    def _accept(self, doc: DidDocument, persist: bool) -> str:
        key = str(doc.id)
        history = self._revisions.get(key)
        if history:
            current = history[-1]
            if doc.public_key != current.public_key or not doc.proof_valid(current.public_key):
                raise UpdateUnauthorized(key)
        elif not doc.proof_valid():
            raise ProofInvalid(key)
        if persist and self._path:
            with self._path.open("ab") as fh:
                fh.write(doc.canonical() + b"\n")
        self._revisions.setdefault(key, []).append(doc)
        return f"{key}#{len(self._revisions[key])}"

    def fetch(self, did: Did | str) -> DidDocument:
        history = self._revisions.get(str(did))
        if not history:
            raise NotFound(str(did))
        return history[-1]

    def history(self, did: Did | str) -> list[DidDocument]:
        return list(self._revisions.get(str(did), ()))

    def __contains__(self, did: object) -> bool:
        return str(did) in self._revisions


class MethodPlugin(Protocol):
    method_name: str

    def publish(self, doc: DidDocument) -> str: ...

    def resolve(self, did: Did) -> DidDocument: ...


class HubMethodPlugin:
    """A local DID method whose documents live in an IdentityHub.

    Identifiers are self-certifying: the method-specific id must equal the
    digest of (public key, created) when a DID is first published.
    """

    def __init__(self, method_name: str, hub: IdentityHub):
        if not re.fullmatch(_METHOD, method_name):
            raise MalformedDid(f"bad method name {method_name!r}")
        self.method_name = method_name
        self.hub = hub

    def publish(self, doc: DidDocument) -> str:
        if doc.id.method != self.method_name:
            raise UnknownMethod(doc.id.method)
        if doc.id not in self.hub and doc.id.method_specific_id != derive_method_specific_id(
            doc.public_key, doc.created
        ):
            raise IdBindingInvalid(str(doc.id))
        return self.hub.store(doc)

    def resolve(self, did: Did) -> DidDocument:
        return self.hub.fetch(did)


@dataclass
class Resolver:
    """Dispatches DIDs to the plugin registered for their method."""

    plugins: Mapping[str, MethodPlugin] = field(default_factory=dict)

    def __post_init__(self):
        plugins = {}
        for name, plugin in dict(self.plugins).items():
            if plugin.method_name != name:
                raise ValueError(f"plugin {plugin.method_name!r} registered as {name!r}")
            plugins[name] = plugin
        self.plugins = MappingProxyType(plugins)

    @classmethod
    def of(cls, *plugins: MethodPlugin) -> "Resolver":
        names = [p.method_name for p in plugins]
        if len(set(names)) != len(names):
            raise ValueError("at most one plugin per method")
        return cls({p.method_name: p for p in plugins})

    def plugin(self, method: str) -> MethodPlugin:
        try:
            return self.plugins[method]
        except KeyError:
            raise UnknownMethod(method) from None

    def resolve(self, did: Did | str) -> DidDocument:
        did = parse_did(str(did))
        return self.plugin(did.method).resolve(did)

    def publish(self, doc: DidDocument) -> str:
        return self.plugin(doc.id.method).publish(doc)

    def create_did(
        self,
        method: str,
        public_key: bytes,
        services: Sequence[ServiceEntry | tuple[str, str]],
        signer: Signer,
        created: int,
    ) -> DidDocument:
        plugin = self.plugin(method)
        doc = build_document(method, public_key, services, signer, created)
        plugin.publish(doc)
        return doc

    def resolvable(self, did: Did | str) -> bool:
        try:
            self.resolve(did)
        except (NotFound, UnknownMethod, MalformedDid):
            return False
        return True


def local_resolver(path: str | Path | None = None, method: str = "iotx") -> Resolver:
    """A resolver with a single hub-backed local method."""
    return Resolver.of(HubMethodPlugin(method, IdentityHub(path)))
