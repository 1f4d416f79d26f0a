"""``iotx`` command line.

Machine-readable results go to stdout as canonical JSON; diagnostics go to
stderr. Exit codes: 0 success, 2 typed protocol or policy rejection (the
reason token is printed on stderr), 1 local fault, 64 bad arguments or
unreadable input files, 69 exchange unreachable.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from .canonical import canonicalize
from .client import DEFAULT_URL, URL_ENV, HttpExchange, RemoteClock
from .clock import SystemClock
from .credential import VerifiableCredential
from .crypto import LocalSigner, read_key_file, write_key_file
from .devicesim import fleet_from_config, run_fleet
from .errors import ExchangeUnavailable, IotxError
from .identity import CONNECTIVITY_TYPES, build_document, parse_did
from .policy import AccessRequestDraft, AuthorizingParty, DenyPolicy, OwnerPolicy, owner_issue_flow
from .timefmt import format_timestamp, parse_timestamp

EXIT_OK = 0
EXIT_FAULT = 1
EXIT_REJECTED = 2
EXIT_USAGE = 64
EXIT_UNAVAILABLE = 69


class BadInput(click.UsageError):
    """An input file that cannot be read or parsed."""


def emit(value) -> None:
    click.echo(canonicalize(value).decode("utf-8"))


def _read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise BadInput(f"cannot read {path}: {exc}") from None


def _signer(path: str | Path) -> LocalSigner:
    try:
        return read_key_file(path)
    except (OSError, ValueError) as exc:
        raise BadInput(f"cannot load key {path}: {exc}") from None


def _client(ctx: click.Context, did: str | None = None, key: str | None = None) -> HttpExchange:
    obj = ctx.find_root().obj
    signer = _signer(key) if key else None
    return HttpExchange(obj["url"], did=did, signer=signer, admin_token=obj.get("admin_token"),
                        http=obj.get("http"))


def _parties(path: str) -> list[AuthorizingParty]:
    base = Path(path).parent
    entries = _read_json(path)
    if not isinstance(entries, list):
        raise BadInput("parties file must be a JSON list")
    out = []
    for e in entries:
        try:
            deny = DenyPolicy.from_dict({"deniedDids": e.get("deniedDids", [])})
            out.append(AuthorizingParty(parse_did(e["did"]), _signer(base / e["keyFile"]), deny))
        except (KeyError, TypeError, AttributeError) as exc:
            raise BadInput(f"bad party entry {e!r}: {exc}") from None
    return out


_timestamp = click.option("--as-of", "as_of", default=None, help="Timestamp (YYYY-MM-DDThh:mm:ssZ).")
_identity_did = click.option("--did", "did", required=True, help="Caller DID.")
_identity_key = click.option("--key", "key", required=True, type=click.Path(exists=True, dir_okay=False),
                             help="Caller key file.")


@click.group()
@click.option("--url", envvar=URL_ENV, default=DEFAULT_URL, show_default=True, help="Exchange base URL.")
@click.option("--admin-token", envvar="IOTX_ADMIN_TOKEN", default=None, help="Operator token.")
@click.pass_context
def cli(ctx: click.Context, url: str, admin_token: str | None):
    ctx.ensure_object(dict)
    ctx.obj.setdefault("url", url)
    ctx.obj.setdefault("admin_token", admin_token)


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
def serve(config_path: str | None):
    """Run the exchange service."""
    from .server import load_config, serve as run

    try:
        config = load_config(config_path)
    except ValueError as exc:
        raise BadInput(str(exc)) from None
    run(config)


@cli.group()
def key():
    """Key files."""


@key.command("generate")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def key_generate(out: str):
    """Write a fresh Ed25519 seed to OUT."""
    if Path(out).exists():
        raise BadInput(f"{out} exists; refusing to overwrite")
    signer = LocalSigner()
    write_key_file(out, signer)
    emit({"keyFile": out, "publicKey": signer.public_key.hex()})


@cli.group()
def did():
    """DID documents."""


@did.command("create")
@_identity_key
@click.option("--method", default="iotx", show_default=True)
@click.option("--created", default=None, help="Creation timestamp; defaults to now.")
@click.pass_context
def did_create(ctx, key: str, method: str, created: str | None):
    """Publish a participant DID for KEY and print its document."""
    signer = _signer(key)
    when = parse_timestamp(created) if created else int(time.time())
    doc = build_document(method, signer.public_key, [], signer, when)
    with _client(ctx) as ex:
        ex.publish(doc)
    emit(doc.to_dict())


@did.command("resolve")
@click.argument("did_text", metavar="DID")
@click.pass_context
def did_resolve(ctx, did_text: str):
    """Print the canonical DID document."""
    with _client(ctx) as ex:
        emit(ex.resolve(did_text).to_dict())


@cli.group()
def device():
    """Device registration."""


@device.command("register")
@click.option("--owner", required=True, help="Owner DID (signs the request).")
@_identity_key
@click.option("--type", "conn_type", required=True, type=click.Choice(sorted(CONNECTIVITY_TYPES)))
@click.option("--conn-id", required=True)
@click.option("--serial", required=True)
@click.option("--cloud-key-slot", default=None)
@click.pass_context
def device_register(ctx, owner: str, key: str, conn_type: str, conn_id: str, serial: str,
                    cloud_key_slot: str | None):
    """Register a device; prints the registration including the device DID."""
    with _client(ctx, owner, key) as ex:
        emit(ex.register_device(owner, conn_type, conn_id, serial, cloud_key_slot))


@cli.group()
def owner():
    """Owner persona."""


@owner.command("publish-policy")
@click.option("--owner", "owner_did", required=True)
@_identity_key
@click.option("--policy", "policy_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def owner_publish_policy(ctx, owner_did: str, key: str, policy_path: str):
    """Send the policy's filter spec and capacities to the exchange."""
    policy = OwnerPolicy.from_dict(_read_json(policy_path))
    with _client(ctx, owner_did, key) as ex:
        ex.publish_policy(owner_did, policy)
    emit({"owner": owner_did, "published": True})


@owner.command("issue")
@click.option("--owner", "owner_did", required=True)
@_identity_key
@click.option("--policy", "policy_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--request", "request_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--parties", "parties_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="JSON list of {did, keyFile, deniedDids} for authorizing parties.")
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Also write the VC here.")
@click.pass_context
def owner_issue(ctx, owner_did: str, key: str, policy_path: str, request_path: str,
                parties_path: str | None, out: str | None):
    """Run the issuance flow and print the signed credential."""
    policy = OwnerPolicy.from_dict(_read_json(policy_path))
    draft = AccessRequestDraft.from_dict(_read_json(request_path))
    parties = _parties(parties_path) if parties_path else []
    with _client(ctx, owner_did, key) as ex:
        vc = owner_issue_flow(draft, policy, ex, ex, ex.signer, owner_did, parties, RemoteClock(ex))
    if out:
        Path(out).write_bytes(vc.canonical() + b"\n")
    emit(vc.to_dict())


@cli.group()
def customer():
    """Customer persona."""


@customer.command("present")
@click.option("--vc", "vc_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def customer_present(ctx, vc_path: str):
    """Present a credential; prints the activated grant."""
    vc = VerifiableCredential.from_dict(_read_json(vc_path))
    with _client(ctx) as ex:
        emit(ex.present_credential(vc))


@customer.command("fetch")
@click.option("--vc-id", required=True)
@click.option("--device", "device_did", required=True)
@_identity_did
@_identity_key
@_timestamp
@click.pass_context
def customer_fetch(ctx, vc_id: str, device_did: str, did: str, key: str, as_of: str | None):
    """Print records since the last access, filtered per the grant."""
    when = parse_timestamp(as_of) if as_of else None
    with _client(ctx, did, key) as ex:
        emit(ex.access_data(vc_id, device_did, when))


@customer.command("control")
@click.option("--vc-id", required=True)
@click.option("--device", "device_did", required=True)
@click.option("--command", "command_json", required=True, help="Command as a JSON object.")
@_identity_did
@_identity_key
@_timestamp
@click.pass_context
def customer_control(ctx, vc_id: str, device_did: str, command_json: str, did: str, key: str,
                     as_of: str | None):
    """Send a control command; prints what was delivered after filtering."""
    try:
        command = json.loads(command_json)
    except ValueError as exc:
        raise BadInput(f"--command is not JSON: {exc}") from None
    if not isinstance(command, dict):
        raise BadInput("--command must be a JSON object")
    when = parse_timestamp(as_of) if as_of else None
    with _client(ctx, did, key) as ex:
        emit(ex.access_control(vc_id, device_did, command, when))


@cli.group()
def sim():
    """Device simulator."""


@sim.command("run")
@click.option("--fleet", "fleet_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--duration", required=True, type=click.IntRange(min=0))
@click.pass_context
def sim_run(ctx, fleet_path: str, duration: int):
    """Emit signed telemetry for every fleet device into the exchange.

    Devices sign through the exchange's keystore, which requires the
    operator token. Against a manual-clock exchange the simulator steps
    the exchange clock through the emission schedule.
    """
    entries = _read_json(fleet_path)
    with _client(ctx) as ex:
        manual = ex.clock_mode() == "manual"
        clock = RemoteClock(ex) if manual else SystemClock()
        fleet = fleet_from_config(entries, ex, epoch=clock.now())
        report = run_fleet(fleet, duration, clock, ex, ex.ingest_telemetry)
    for conn, at, reason in report.errors:
        click.echo(f"{conn} at {at}: {reason}", err=True)
    emit({"counts": report.counts, "total": report.total,
          "errors": [{"connectivityId": c, "at": a, "error": r} for c, a, r in report.errors]})
    if report.errors:
        ctx.exit(EXIT_REJECTED)


@cli.group()
def clock():
    """Exchange clock (manual mode only)."""


@clock.command("set")
@click.option("--now", "now_text", default=None)
@click.option("--advance", type=int, default=None)
@click.pass_context
def clock_set(ctx, now_text: str | None, advance: int | None):
    """Set or advance a manual exchange clock."""
    if (now_text is None) == (advance is None):
        raise click.UsageError("give exactly one of --now and --advance")
    with _client(ctx) as ex:
        now = ex.set_clock(now=parse_timestamp(now_text) if now_text else None, advance=advance)
    emit({"now": format_timestamp(now)})


def run(args: list[str] | None = None, obj: dict | None = None) -> int:
    """Invoke the CLI and map the outcome to an exit code."""
    try:
        rv = cli.main(args=args, prog_name="iotx", standalone_mode=False, obj=obj if obj is not None else {})
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_FAULT
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_FAULT
    except ExchangeUnavailable as exc:
        click.echo(f"{exc.reason}: {exc}", err=True)
        return EXIT_UNAVAILABLE
    except IotxError as exc:
        detail = str(exc)
        click.echo(exc.reason if detail == exc.reason else f"{exc.reason}: {detail}", err=True)
        if exc.step is not None:
            click.echo(f"step {exc.step}", err=True)
        return EXIT_REJECTED
    except Exception as exc:  # a local fault, not a protocol outcome
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_FAULT
    return rv if isinstance(rv, int) else EXIT_OK


def main() -> None:
    sys.exit(run())
