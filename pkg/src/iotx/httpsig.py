"""Signed HTTP requests.

A caller proves control of a DID by signing a canonical digest of the
request with the key in that DID's document. The signed form binds the
method, path, query string and a SHA-256 of the raw body.
"""

from __future__ import annotations

import hashlib

from .canonical import canonicalize
from .crypto import Signer, verify
from .errors import IotxError, RequestUnauthenticated

DID_HEADER = "X-IOTX-DID"
SIGNATURE_HEADER = "X-IOTX-Signature"


def request_payload(method: str, path: str, query: str, body: bytes) -> bytes:
    return canonicalize({
        "method": method.upper(),
        "path": path,
        "query": query,
        "body": hashlib.sha256(body).hexdigest(),
    })


def sign_request(did: str, signer: Signer, method: str, path: str, query: str, body: bytes) -> dict[str, str]:
    sig = signer.sign(request_payload(method, path, query, body))
    return {DID_HEADER: did, SIGNATURE_HEADER: sig.hex()}


def authenticate(headers, resolver, method: str, path: str, query: str, body: bytes) -> str:
    """Return the caller's DID, or raise RequestUnauthenticated."""
    did = headers.get(DID_HEADER)
    sig_hex = headers.get(SIGNATURE_HEADER)
    if not did or not sig_hex:
        raise RequestUnauthenticated("missing signature headers")
    try:
        signature = bytes.fromhex(sig_hex)
        public_key = resolver.resolve(did).public_key
    except (ValueError, IotxError):
        raise RequestUnauthenticated(did) from None
    if not verify(public_key, request_payload(method, path, query, body), signature):
        raise RequestUnauthenticated(did)
    return did
