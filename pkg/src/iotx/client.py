"""HTTP client for a running exchange.

:class:`HttpExchange` mirrors the in-process :class:`~iotx.exchange.Exchange`
closely enough that the owner issuance flow and the device simulator can
run against either. Rejections come back as the same typed errors.
"""

from __future__ import annotations

from urllib.parse import quote, urlencode

import httpx

from .canonical import canonicalize
from .credential import VerifiableCredential
from .crypto import Signer
from .errors import ExchangeUnavailable, MalformedDid, NotFound, UnknownMethod, error_from_dict
from .httpsig import sign_request
from .identity import Did, DidDocument
from .keystore import IdentityMapping
from .policy import OwnerPolicy
from .telemetry import SignedRecord
from .timefmt import format_timestamp, parse_timestamp

URL_ENV = "IOTX_EXCHANGE_URL"
DEFAULT_URL = "http://127.0.0.1:8080"


class HttpExchange:
    def __init__(self, base_url: str = DEFAULT_URL, *, did: str | None = None, signer: Signer | None = None,
                 admin_token: str | None = None, http: httpx.Client | None = None, timeout: float = 10.0):
        self.did = did
        self.signer = signer
        self.admin_token = admin_token
        self._owns_http = http is None
        self.http = http or httpx.Client(base_url=base_url, timeout=timeout)

    def close(self) -> None:
        if self._owns_http:
            self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _request(self, method: str, path: str, *, params: dict | None = None, body: dict | None = None,
                 signed: bool = False, admin: bool = False) -> dict | None:
        raw = canonicalize(body) if body is not None else b""
        query = urlencode(params or {})
        headers = {"content-type": "application/json"} if body is not None else {}
        if signed:
            if not (self.did and self.signer):
                raise ValueError("this request must be signed; no identity configured")
            headers.update(sign_request(self.did, self.signer, method, path, query, raw))
        if admin and self.admin_token:
            headers["authorization"] = f"Bearer {self.admin_token}"
        url = quote(path, safe="/:") + (f"?{query}" if query else "")
        try:
            resp = self.http.request(method, url, content=raw or None, headers=headers)
        except httpx.TransportError as exc:
            raise ExchangeUnavailable(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 204:
            return None
        try:
            data = resp.json()
        except ValueError:
            data = None
        if resp.status_code >= 400:
            if isinstance(data, dict) and "error" in data:
                raise error_from_dict(data)
            raise ExchangeUnavailable(f"HTTP {resp.status_code}")
        return data

    # identity

    def resolve(self, did: Did | str) -> DidDocument:
        return DidDocument.from_dict(self._request("GET", f"/v1/dids/{did}"))

    def resolvable(self, did: Did | str) -> bool:
        try:
            self.resolve(did)
        except (NotFound, UnknownMethod, MalformedDid):
            return False
        return True

    def publish(self, doc: DidDocument) -> str:
        return self._request("POST", "/v1/dids", body=doc.to_dict())["revision"]

    # owner

    def register_device(self, owner_did: Did | str, connectivity_type: str, connectivity_id: str,
                        device_unique_id: str, cloud_key_slot: str | None = None) -> dict:
        body = {"ownerDid": str(owner_did), "connectivityType": connectivity_type,
                "connectivityId": connectivity_id, "deviceUniqueId": device_unique_id}
        if cloud_key_slot is not None:
            body["cloudKeySlot"] = cloud_key_slot
        return self._request("POST", "/v1/devices", body=body, signed=True)

    def issue_vc_id(self, owner_did: Did | str) -> str:
        return self._request("POST", "/v1/vc-ids", body={"ownerDid": str(owner_did)}, signed=True)["vcId"]

    def active_grants(self, device_did: Did | str) -> int:
        return self._request("GET", f"/v1/devices/{device_did}/grants")["active"]

    def publish_policy(self, owner_did: Did | str, policy: OwnerPolicy) -> None:
        self._request("POST", f"/v1/owners/{owner_did}/policy", body=policy.to_dict(), signed=True)

    # customer

    def present_credential(self, vc: VerifiableCredential) -> dict:
        return self._request("POST", "/v1/access", body=vc.to_dict())

    def access_data(self, vc_id: str, device_did: Did | str, as_of: int | None = None) -> list[dict]:
        params = {"asOf": format_timestamp(as_of)} if as_of is not None else None
        return self._request("GET", f"/v1/access/{vc_id}/devices/{device_did}/data",
                             params=params, signed=True)["records"]

    def access_control(self, vc_id: str, device_did: Did | str, command: dict, as_of: int | None = None) -> dict:
        body: dict = {"command": command}
        if as_of is not None:
            body["asOf"] = format_timestamp(as_of)
        return self._request("POST", f"/v1/access/{vc_id}/devices/{device_did}/control",
                             body=body, signed=True)["delivered"]

    # devices

    def ingest_telemetry(self, connectivity_id: str, signed: SignedRecord) -> dict:
        return self._request("POST", f"/v1/telemetry/{connectivity_id}", body=signed.to_dict())

    # operator

    def now(self) -> int:
        return parse_timestamp(self._request("GET", "/v1/clock")["now"])

    def clock_mode(self) -> str:
        return self._request("GET", "/v1/clock")["mode"]

    def set_clock(self, now: int | None = None, advance: int | None = None) -> int:
        body = {"now": format_timestamp(now)} if now is not None else {"advance": advance}
        return parse_timestamp(self._request("POST", "/v1/clock", body=body, admin=True)["now"])

    def sign_with(self, key_handle: str, message: bytes) -> bytes:
        out = self._request("POST", f"/v1/keystore/{key_handle}/sign", body={"message": message.hex()}, admin=True)
        return bytes.fromhex(out["signature"])

    def lookup_by(self, field: str, value: str) -> IdentityMapping:
        return IdentityMapping.from_dict(
            self._request("GET", "/v1/keystore/mappings", params={field: value}, admin=True))


class RemoteClock:
    """Reads (and, in manual mode, moves) the exchange's clock."""

    def __init__(self, exchange: HttpExchange):
        self.exchange = exchange

    def now(self) -> int:
        return self.exchange.now()

    def set(self, t: int) -> None:
        self.exchange.set_clock(now=t)
