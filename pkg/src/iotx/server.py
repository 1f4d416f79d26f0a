"""HTTP/JSON front end for the exchange.

Every response body is canonical JSON. Failures map to
``{"error": <reason token>, "step": <n>, ...}`` with a status derived from
the token. Owner and customer calls are authenticated with signed request
headers (see :mod:`iotx.httpsig`); credential presentation is a bearer
operation because the credential carries its own proof; telemetry carries
the device's record signature.
"""

from __future__ import annotations

import hmac
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Request
from fastapi.responses import Response
from starlette.concurrency import run_in_threadpool

from .canonical import canonicalize
from .clock import ManualClock, make_clock
from .credential import VerifiableCredential
from .errors import IotxError, MalformedRequest, RequestUnauthenticated
from .exchange import Exchange
from .httpsig import authenticate
from .identity import DidDocument, local_resolver
from .keystore import LOOKUP_KEYS, PASSPHRASE_ENV, KeyStore
from .policy import DEFAULT_CAPACITY, OwnerPolicy
from .privacy import FilterRegistry
from .telemetry import SignedRecord
from .timefmt import format_timestamp, parse_timestamp

log = logging.getLogger("iotx.server")

STATUS = {
    400: {"MalformedRequest", "MalformedDid", "MalformedCredential", "MalformedTimestamp", "MalformedPeriod",
          "ServiceSyntaxError", "UnknownConnectivityType", "DuplicateServiceType", "UnsupportedValue",
          "PolicyInvalid", "SubjectInvalid", "UnknownFilter", "UnknownMethod", "ClockSkew"},
    401: {"RequestUnauthenticated", "SignatureInvalid", "ProofInvalid"},
    403: {"NotGrantee", "PermissionDenied", "DeviceNotInGrant", "OutsideWindow", "GrantNotActive",
          "VcIdIssuerMismatch", "UpdateUnauthorized", "IdBindingInvalid"},
    404: {"NotFound", "UnknownVcId", "UnknownDevice", "UnknownKeyHandle"},
    409: {"DuplicateConnectivityId", "DuplicateIdentity", "VcIdAlreadyUsed", "CapacityExceeded",
          "NonMonotoneTimestamp"},
    422: {"VerificationFailed", "OwnerUnresolvable", "CustomerUnresolvable", "DeviceUnresolvable"},
    429: {"PeriodNotElapsed"},
}
_STATUS_OF = {token: code for code, tokens in STATUS.items() for token in tokens}


def status_for(reason: str) -> int:
    return _STATUS_OF.get(reason, 400)


@dataclass
class ServerConfig:
    listen: str = "127.0.0.1:8080"
    default_capacity: int = DEFAULT_CAPACITY
    clock_mode: str = "real"
    clock_start: int | None = None
    data_dir: str | None = None
    admin_token: str | None = None
    filters: str | None = None

    @property
    def host(self) -> str:
        return self.listen.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen.rsplit(":", 1)[1])


_CONFIG_KEYS = {
    "listen": ("listen", str, "IOTX_LISTEN"),
    "defaultCapacity": ("default_capacity", int, "IOTX_DEFAULT_CAPACITY"),
    "clockMode": ("clock_mode", str, "IOTX_CLOCK_MODE"),
    "clockStart": ("clock_start", str, "IOTX_CLOCK_START"),
    "dataDir": ("data_dir", str, "IOTX_DATA_DIR"),
    "adminToken": ("admin_token", str, "IOTX_ADMIN_TOKEN"),
    "filters": ("filters", str, "IOTX_FILTERS"),
}


def load_config(path: str | Path | None = None, env: dict | None = None) -> ServerConfig:
    """Read a JSON config file, then apply ``IOTX_*`` environment overrides."""
    env = os.environ if env is None else env
    raw: dict[str, Any] = json.loads(Path(path).read_text()) if path else {}
    unknown = set(raw) - set(_CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    values: dict[str, Any] = {}
    for key, (attr, cast, var) in _CONFIG_KEYS.items():
        value = env.get(var, raw.get(key))
        if value is not None:
            values[attr] = cast(value)
    if "clock_start" in values:
        values["clock_start"] = parse_timestamp(values["clock_start"])
    config = ServerConfig(**values)
    if config.clock_mode not in ("real", "manual"):
        raise ValueError(f"clockMode must be real or manual, not {config.clock_mode!r}")
    if config.default_capacity < 1:
        raise ValueError("defaultCapacity must be positive")
    return config


def build_exchange(config: ServerConfig) -> Exchange:
    clock = make_clock(config.clock_mode, config.clock_start)
    registry = FilterRegistry.from_file(config.filters) if config.filters else FilterRegistry()
    if config.data_dir:
        root = Path(config.data_dir)
        root.mkdir(parents=True, exist_ok=True)
        resolver = local_resolver(root / "dids.jsonl")
        keystore = KeyStore(root / "keystore.bin", os.environ.get(PASSPHRASE_ENV), clock=clock)
    else:
        resolver, keystore = local_resolver(), KeyStore(clock=clock)
    return Exchange(resolver, keystore, clock=clock, registry=registry,
                    default_capacity=config.default_capacity)


class CanonicalResponse(Response):
    media_type = "application/json"

    def render(self, content: Any) -> bytes:
        return canonicalize(content)


def _error(exc: IotxError) -> CanonicalResponse:
    body = exc.to_dict()
    message = str(exc)
    if message and message not in (exc.reason, body.get("reason")):
        body["message"] = message
    return CanonicalResponse(body, status_code=status_for(exc.reason))


def _reject_float(text: str):
    raise MalformedRequest("floats are not allowed in request bodies")


async def _body(request: Request) -> tuple[bytes, Any]:
    raw = await request.body()
    try:
        data = json.loads(raw, parse_float=_reject_float) if raw else {}
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedRequest(f"invalid JSON: {exc}") from None
    return raw, data


def _field(data: Any, name: str, kind: type = str) -> Any:
    if not isinstance(data, dict) or not isinstance(data.get(name), kind):
        raise MalformedRequest(f"missing or invalid {name!r}")
    return data[name]


def create_app(exchange: Exchange, config: ServerConfig | None = None) -> FastAPI:
    config = config or ServerConfig()
    app = FastAPI(title="iotx exchange", docs_url=None, redoc_url=None)
    app.state.exchange = exchange
    app.state.config = config

    @app.exception_handler(IotxError)
    async def _typed(request: Request, exc: IotxError):
        return _error(exc)

    def caller(request: Request, raw: bytes) -> str:
        return authenticate(request.headers, exchange.resolver, request.method,
                            request.scope["path"], request.url.query, raw)

    def require_admin(request: Request) -> None:
        token = config.admin_token
        offered = request.headers.get("authorization", "").removeprefix("Bearer ")
        if not token or not hmac.compare_digest(offered.encode(), token.encode()):
            raise RequestUnauthenticated("admin token required")

    # identity

    @app.get("/v1/dids/{did}")
    async def resolve_did(did: str):
        return CanonicalResponse(exchange.resolve(did).to_dict())

    @app.post("/v1/dids", status_code=201)
    async def publish_did(request: Request):
        _, data = await _body(request)
        try:
            doc = DidDocument.from_dict(data)
        except (TypeError, ValueError, KeyError) as exc:
            raise MalformedRequest(str(exc)) from None
        revision = await run_in_threadpool(exchange.resolver.publish, doc)
        return CanonicalResponse({"did": str(doc.id), "revision": revision}, status_code=201)

    # devices and policy

    @app.post("/v1/devices", status_code=201)
    async def register_device(request: Request):
        raw, data = await _body(request)
        who = caller(request, raw)
        owner = _field(data, "ownerDid")
        if owner != who:
            raise RequestUnauthenticated("ownerDid must match the signing DID")
        slot = data.get("cloudKeySlot")
        if slot is not None and not isinstance(slot, str):
            raise MalformedRequest("cloudKeySlot must be a string")
        reg = await run_in_threadpool(
            exchange.register_device, owner, _field(data, "connectivityType"),
            _field(data, "connectivityId"), _field(data, "deviceUniqueId"), slot,
        )
        return CanonicalResponse(reg.to_dict(), status_code=201)

    @app.get("/v1/devices/{did}/grants")
    async def device_grants(did: str):
        exchange.registration(did)
        return CanonicalResponse({"did": did, "active": exchange.active_grants(did)})

    @app.post("/v1/owners/{did}/policy", status_code=204)
    async def publish_policy(did: str, request: Request):
        raw, data = await _body(request)
        if caller(request, raw) != did:
            raise RequestUnauthenticated("policy must be signed by its owner")
        exchange.publish_policy(did, OwnerPolicy.from_dict(data, exchange.registry))
        return Response(status_code=204)

    # credentials and grants

    @app.post("/v1/vc-ids", status_code=201)
    async def issue_vc_id(request: Request):
        raw, data = await _body(request)
        owner = _field(data, "ownerDid")
        if caller(request, raw) != owner:
            raise RequestUnauthenticated("ownerDid must match the signing DID")
        return CanonicalResponse({"vcId": exchange.issue_vc_id(owner)}, status_code=201)

    @app.post("/v1/access", status_code=201)
    async def present(request: Request):
        _, data = await _body(request)
        vc = VerifiableCredential.from_dict(data)
        grant = await run_in_threadpool(exchange.present_credential, vc)
        return CanonicalResponse(grant.summary(), status_code=201)

    @app.get("/v1/access/{vc_id}/devices/{did}/data")
    async def access_data(vc_id: str, did: str, request: Request):
        who = caller(request, b"")
        as_of = request.query_params.get("asOf")
        as_of = parse_timestamp(as_of) if as_of else None
        rows = await run_in_threadpool(exchange.access_data, who, vc_id, did, as_of)
        return CanonicalResponse({"vcId": vc_id, "device": did, "records": [r.to_dict() for r in rows]})

    @app.post("/v1/access/{vc_id}/devices/{did}/control")
    async def access_control(vc_id: str, did: str, request: Request):
        raw, data = await _body(request)
        who = caller(request, raw)
        command = _field(data, "command", dict)
        as_of = data.get("asOf")
        as_of = parse_timestamp(as_of) if as_of else None
        delivered = await run_in_threadpool(exchange.access_control, who, vc_id, did, command, as_of)
        return CanonicalResponse({"vcId": vc_id, "device": did, "delivered": delivered})

    # telemetry

    @app.post("/v1/telemetry/{connectivity_id}", status_code=201)
    async def ingest(connectivity_id: str, request: Request):
        _, data = await _body(request)
        record = await run_in_threadpool(exchange.ingest_telemetry, connectivity_id, SignedRecord.from_dict(data))
        return CanonicalResponse({"stored": record.to_dict()}, status_code=201)

    # operator endpoints

    @app.get("/v1/clock")
    async def get_clock():
        return CanonicalResponse({"now": format_timestamp(exchange.clock.now()),
                                  "mode": "manual" if isinstance(exchange.clock, ManualClock) else "real"})

    @app.post("/v1/clock")
    async def set_clock(request: Request):
        require_admin(request)
        _, data = await _body(request)
        clock = exchange.clock
        if not isinstance(clock, ManualClock):
            raise MalformedRequest("clock is not in manual mode")
        if "now" in data:
            clock.set(parse_timestamp(_field(data, "now")))
        elif "advance" in data:
            clock.advance(_field(data, "advance", int))
        else:
            raise MalformedRequest("expected 'now' or 'advance'")
        return CanonicalResponse({"now": format_timestamp(clock.now())})

    @app.post("/v1/keystore/{handle}/sign")
    async def keystore_sign(handle: str, request: Request):
        require_admin(request)
        _, data = await _body(request)
        try:
            message = bytes.fromhex(_field(data, "message"))
        except ValueError:
            raise MalformedRequest("message must be hex") from None
        return CanonicalResponse({"signature": exchange.keystore.sign_with(handle, message).hex()})

    @app.get("/v1/keystore/mappings")
    async def keystore_mapping(request: Request):
        require_admin(request)
        params = request.query_params
        if len(params) != 1:
            raise MalformedRequest("exactly one lookup key required")
        ((name, value),) = params.items()
        if name not in LOOKUP_KEYS:
            raise MalformedRequest(f"lookup key must be one of {LOOKUP_KEYS}")
        return CanonicalResponse(exchange.keystore.lookup_by(name, value).to_dict())

    return app


def serve(config: ServerConfig) -> None:
    import uvicorn

    exchange = build_exchange(config)
    if config.clock_mode == "manual" and not config.admin_token:
        log.warning("manual clock without adminToken: the clock cannot be moved over HTTP")
    uvicorn.run(create_app(exchange, config), host=config.host, port=config.port, log_level="info")
