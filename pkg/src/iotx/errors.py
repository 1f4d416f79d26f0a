"""Typed failures shared across the exchange.

Every failure carries a ``reason`` token (the class name unless overridden)
so that HTTP responses and CLI exit codes can be derived mechanically.
"""

from __future__ import annotations


class IotxError(Exception):
    reason: str = "IotxError"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if "reason" not in cls.__dict__:
            cls.reason = cls.__name__

    def __init__(self, message: str = "", *, step: int | None = None):
        super().__init__(message or self.reason)
        self.step = step

    def to_dict(self) -> dict:
        out: dict = {"error": self.reason}
        if self.step is not None:
            out["step"] = self.step
        return out


# identity
class MalformedDid(IotxError):
    pass


class UnknownMethod(IotxError):
    pass


class NotFound(IotxError):
    pass


class ServiceSyntaxError(IotxError):
    pass


class UnknownConnectivityType(ServiceSyntaxError):
    reason = "UnknownConnectivityType"


class DuplicateServiceType(IotxError):
    pass


class ProofInvalid(IotxError):
    pass


class UpdateUnauthorized(IotxError):
    pass


class IdBindingInvalid(IotxError):
    pass


# credential
class UnsupportedValue(IotxError):
    pass


class MalformedTimestamp(IotxError):
    pass


class MalformedPeriod(IotxError):
    pass


class MalformedCredential(IotxError):
    pass


class SubjectInvalid(IotxError):
    pass


class SignerMismatch(IotxError):
    pass


# keystore
class UnknownKeyHandle(IotxError):
    pass


class DuplicateIdentity(IotxError):
    pass


class DanglingKeyHandle(IotxError):
    pass


class KeystoreLocked(IotxError):
    pass


# privacy
class UnknownFilter(IotxError):
    pass


class FilterConfigError(IotxError):
    pass


# policy / issuance
class PolicyInvalid(IotxError):
    pass


class CustomerUnresolvable(IotxError):
    pass


class DeviceUnresolvable(IotxError):
    pass


class CapacityExceeded(IotxError):
    pass


class PolicyDenied(IotxError):
    def __init__(self, party: str = "", *, step: int | None = None):
        super().__init__(f"denied by {party}" if party else "", step=step)
        self.party = party

    def to_dict(self) -> dict:
        out = super().to_dict()
        if self.party:
            out["party"] = self.party
        return out


class PartyUnavailable(IotxError):
    pass


class ExchangeUnavailable(IotxError):
    pass


# exchange
class DuplicateConnectivityId(IotxError):
    pass


class OwnerUnresolvable(IotxError):
    pass


class VerificationFailed(IotxError):
    def __init__(self, detail: str, *, step: int | None = None):
        super().__init__(detail, step=step)
        self.detail = detail

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["reason"] = self.detail
        return out


class UnknownVcId(IotxError):
    pass


class VcIdAlreadyUsed(IotxError):
    pass


class VcIdIssuerMismatch(IotxError):
    pass


class GrantNotActive(IotxError):
    pass


class NotGrantee(IotxError):
    pass


class DeviceNotInGrant(IotxError):
    pass


class PermissionDenied(IotxError):
    pass


class OutsideWindow(IotxError):
    pass


class PeriodNotElapsed(IotxError):
    pass


class ClockSkew(IotxError):
    pass


class UnknownDevice(IotxError):
    pass


class SignatureInvalid(IotxError):
    pass


class NonMonotoneTimestamp(IotxError):
    pass


class RequestUnauthenticated(IotxError):
    pass


class MalformedRequest(IotxError):
    pass


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


def error_from_dict(body: dict) -> IotxError:
    """Rebuild a typed error from its wire form ``{"error", "step", ...}``."""
    token = str(body.get("error", "IotxError"))
    step = body.get("step")
    cls = next((c for c in _all_subclasses(IotxError) if c.reason == token), None)
    if cls is VerificationFailed:
        return VerificationFailed(str(body.get("reason", "")), step=step)
    if cls is PolicyDenied:
        return PolicyDenied(str(body.get("party", "")), step=step)
    if cls is None:
        exc = IotxError(str(body.get("message", token)), step=step)
        exc.reason = token
        return exc
    return cls(str(body.get("message", "")), step=step)
