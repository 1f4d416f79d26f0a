"""Verifiable credentials carrying device access requests.

A credential's subject names the customer, the devices, the access window,
the permitted polling period, the permissions and whether privacy filtering
applies. The issuer signs everything but the proof; authorizing parties
endorse the body (everything but proof and endorsements) so that each of
them signs the exact terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Protocol

from .canonical import canonicalize
from .crypto import SIGNATURE_SIZE, Signer, verify
from .errors import (
    IotxError,
    MalformedCredential,
    MalformedDid,
    MalformedPeriod,
    MalformedTimestamp,
    NotFound,
    SignerMismatch,
    SubjectInvalid,
    UnknownMethod,
)
from .identity import Did, DidDocument, parse_did
from .timefmt import format_period, format_timestamp, parse_period, parse_timestamp

__all__ = [
    "PERMISSIONS",
    "VALID",
    "AccessRequestSubject",
    "Endorsement",
    "VerifiableCredential",
    "canonicalize",
    "format_period",
    "format_timestamp",
    "parse_period",
    "parse_timestamp",
    "sign_credential",
    "verify_credential",
]

PERMISSIONS = frozenset({"data", "control"})
VALID = "Valid"

SUBJECT_KEYS = frozenset(
    {"id", "deviceIds", "start", "end", "period", "permissions", "privacyPreserving"}
)
VC_KEYS = frozenset(
    {"vcId", "issuer", "issuanceDate", "credentialSubject", "endorsements", "proof"}
)


class DidResolver(Protocol):
    def resolve(self, did: Did | str) -> DidDocument: ...


def check_window(start: int, end: int, period: int) -> None:
    if not start < end:
        raise SubjectInvalid("start must precede end")
    if not 0 < period <= end - start:
        raise SubjectInvalid("period must be positive and fit inside the window")


@dataclass(frozen=True)
class AccessRequestSubject:
    """The ``credentialSubject`` of an access credential.

    ``start``, ``end`` and ``period`` keep the exact text they were issued
    with so a credential re-serializes to the bytes its issuer signed.
    """

    id: Did
    device_ids: tuple[Did, ...]
    start: str
    end: str
    period: str
    permissions: tuple[str, ...]
    privacy_preserving: bool

    @classmethod
    def create(
        cls,
        customer: Did | str,
        device_ids: Iterable[Did | str],
        start: int | str,
        end: int | str,
        period: int | str,
        permissions: Iterable[str],
        privacy_preserving: bool,
    ) -> "AccessRequestSubject":
        subject = cls(
            id=parse_did(customer),
            device_ids=tuple(parse_did(d) for d in device_ids),
            start=start if isinstance(start, str) else format_timestamp(start),
            end=end if isinstance(end, str) else format_timestamp(end),
            period=period if isinstance(period, str) else format_period(period),
            permissions=tuple(permissions),
            privacy_preserving=bool(privacy_preserving),
        )
        subject.validate()
        return subject

    @property
    def start_epoch(self) -> int:
        return parse_timestamp(self.start)

    @property
    def end_epoch(self) -> int:
        return parse_timestamp(self.end)

    @property
    def period_seconds(self) -> int:
        return parse_period(self.period)

    def validate(self) -> None:
        try:
            start, end, period = self.start_epoch, self.end_epoch, self.period_seconds
        except (MalformedTimestamp, MalformedPeriod) as exc:
            raise SubjectInvalid(str(exc)) from exc
        check_window(start, end, period)
        if not self.device_ids:
            raise SubjectInvalid("deviceIds must be nonempty")
        if len(set(self.device_ids)) != len(self.device_ids):
            raise SubjectInvalid("deviceIds contains duplicates")
        if not self.permissions or not set(self.permissions) <= PERMISSIONS:
            raise SubjectInvalid(f"permissions must be a nonempty subset of {sorted(PERMISSIONS)}")
        if len(set(self.permissions)) != len(self.permissions):
            raise SubjectInvalid("permissions contains duplicates")

    def to_dict(self) -> dict:
        return {
            "id": str(self.id),
            "deviceIds": [str(d) for d in self.device_ids],
            "start": self.start,
            "end": self.end,
            "period": self.period,
            "permissions": list(self.permissions),
            "privacyPreserving": self.privacy_preserving,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AccessRequestSubject":
        if not isinstance(data, Mapping) or set(data) != SUBJECT_KEYS:
            raise MalformedCredential("credentialSubject has the wrong keys")
        ids, perms = data["deviceIds"], data["permissions"]
        if not (isinstance(ids, list) and isinstance(perms, list)):
            raise MalformedCredential("deviceIds and permissions must be lists")
        if not all(isinstance(p, str) for p in perms):
            raise MalformedCredential("permissions must be strings")
        if not all(isinstance(data[k], str) for k in ("start", "end", "period")):
            raise MalformedCredential("start, end and period must be strings")
        if not isinstance(data["privacyPreserving"], bool):
            raise MalformedCredential("privacyPreserving must be a boolean")
        try:
            return cls(
                id=parse_did(data["id"]),
                device_ids=tuple(parse_did(d) for d in ids),
                start=data["start"],
                end=data["end"],
                period=data["period"],
                permissions=tuple(perms),
                privacy_preserving=data["privacyPreserving"],
            )
        except MalformedDid as exc:
            raise MalformedCredential(str(exc)) from exc


@dataclass(frozen=True)
class Endorsement:
    party: Did
    signature: bytes

    def to_dict(self) -> dict:
        return {"party": str(self.party), "signature": self.signature.hex()}


def _hex(value: Any, what: str) -> bytes:
    if not isinstance(value, str) or value != value.lower():
        raise MalformedCredential(f"{what} must be lowercase hex")
    try:
        return bytes.fromhex(value)
    except ValueError as exc:
        raise MalformedCredential(f"{what} is not hex") from exc


@dataclass(frozen=True)
class VerifiableCredential:
    vc_id: str
    issuer: Did
    issuance_date: int
    subject: AccessRequestSubject
    endorsements: tuple[Endorsement, ...] = ()
    proof: bytes = b""

    def body(self) -> dict:
        """Fields endorsed by authorizing parties."""
        return {
            "vcId": self.vc_id,
            "issuer": str(self.issuer),
            "issuanceDate": format_timestamp(self.issuance_date),
            "credentialSubject": self.subject.to_dict(),
        }

    def endorsement_payload(self) -> bytes:
        return canonicalize(self.body())

    def proof_payload(self) -> bytes:
        body = self.body()
        body["endorsements"] = [e.to_dict() for e in self.endorsements]
        return canonicalize(body)

    def to_dict(self) -> dict:
        body = self.body()
        body["endorsements"] = [e.to_dict() for e in self.endorsements]
        body["proof"] = self.proof.hex()
        return body

    def canonical(self) -> bytes:
        return canonicalize(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VerifiableCredential":
        if not isinstance(data, Mapping) or set(data) != VC_KEYS:
            raise MalformedCredential("credential has the wrong keys")
        if not isinstance(data["vcId"], str) or not isinstance(data["issuanceDate"], str):
            raise MalformedCredential("vcId and issuanceDate must be strings")
        try:
            issued = parse_timestamp(data["issuanceDate"])
            issuer = parse_did(data["issuer"])
        except (MalformedTimestamp, MalformedDid) as exc:
            raise MalformedCredential(str(exc)) from exc
        if format_timestamp(issued) != data["issuanceDate"]:
            raise MalformedCredential("issuanceDate must use the YYYY-MM-DDThh:mm:ssZ form")
        if not isinstance(data["endorsements"], list):
            raise MalformedCredential("endorsements must be a list")
        endorsements = []
        for e in data["endorsements"]:
            if not isinstance(e, Mapping) or set(e) != {"party", "signature"}:
                raise MalformedCredential("endorsement must carry party and signature")
            try:
                party = parse_did(e["party"])
            except MalformedDid as exc:
                raise MalformedCredential(str(exc)) from exc
            endorsements.append(Endorsement(party, _hex(e["signature"], "endorsement signature")))
        return cls(
            vc_id=data["vcId"],
            issuer=issuer,
            issuance_date=issued,
            subject=AccessRequestSubject.from_dict(data["credentialSubject"]),
            endorsements=tuple(endorsements),
            proof=_hex(data["proof"], "proof"),
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> "VerifiableCredential":
        try:
            data = json.loads(text)
        except (ValueError, UnicodeDecodeError) as exc:
            raise MalformedCredential("not JSON") from exc
        return cls.from_dict(data)


def sign_credential(
    unsigned: VerifiableCredential, signer: Signer, resolver: DidResolver
) -> VerifiableCredential:
    """Validate the subject, check the signer owns the issuer DID, and sign."""
    unsigned.subject.validate()
    try:
        issuer_doc = resolver.resolve(unsigned.issuer)
    except (NotFound, UnknownMethod) as exc:
        raise SignerMismatch(f"issuer {unsigned.issuer} does not resolve") from exc
    if issuer_doc.public_key != signer.public_key:
        raise SignerMismatch(f"signer key is not the key of {unsigned.issuer}")
    return replace(unsigned, proof=signer.sign(unsigned.proof_payload()))


def _resolve_key(resolver: DidResolver, did: Did) -> bytes | None:
    try:
        return resolver.resolve(did).public_key
    except IotxError:
        return None


def verify_credential(vc: VerifiableCredential, resolver: DidResolver) -> str:
    """Return ``"Valid"`` or the token of the first failing check.

    Checks run in a fixed order: issuer resolution, issuer proof,
    endorsements, subject invariants, device resolution.
    """
    issuer_key = _resolve_key(resolver, vc.issuer)
    if issuer_key is None:
        return "IssuerUnresolvable"
    if len(vc.proof) != SIGNATURE_SIZE or not verify(issuer_key, vc.proof_payload(), vc.proof):
        return "ProofInvalid"
    payload = vc.endorsement_payload()
    for e in vc.endorsements:
        key = _resolve_key(resolver, e.party)
        if key is None or not verify(key, payload, e.signature):
            return "EndorsementInvalid"
    try:
        vc.subject.validate()
    except SubjectInvalid:
        return "SubjectInvalid"
    for device in vc.subject.device_ids:
        if _resolve_key(resolver, device) is None:
            return "DeviceUnresolvable"
    return VALID
