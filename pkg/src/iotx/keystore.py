"""Key custody and the device identity mapping table.

Private keys are generated inside the store and never leave it; callers
hold opaque handles and ask the store to sign. The in-process
implementation can persist to an append-only file of length-prefixed,
AES-GCM encrypted records whose key is derived from a passphrase.
"""

from __future__ import annotations

import json
import os
import secrets
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from .canonical import canonicalize
from .crypto import raw_public, raw_seed
from .errors import (
    DanglingKeyHandle,
    DuplicateIdentity,
    KeystoreLocked,
    NotFound,
    UnknownKeyHandle,
)

PASSPHRASE_ENV = "IOTX_KEYSTORE_PASSPHRASE"

_MAGIC = b"IOTXKS1\n"
_SALT_LEN = 16
_NONCE_LEN = 12
LOOKUP_KEYS = ("did", "deviceUniqueId", "connectivityId")


@dataclass(frozen=True)
class KeyRecord:
    key_handle: str
    public_key: bytes
    created_at: int


@dataclass(frozen=True)
class IdentityMapping:
    device_unique_id: str
    did: str
    connectivity_id: str
    key_handle: str
    cloud_key_slot: str | None = None

    def to_dict(self) -> dict:
        out = {
            "deviceUniqueId": self.device_unique_id,
            "did": self.did,
            "connectivityId": self.connectivity_id,
            "keyHandle": self.key_handle,
        }
        if self.cloud_key_slot is not None:
            out["cloudKeySlot"] = self.cloud_key_slot
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "IdentityMapping":
        return cls(
            device_unique_id=data["deviceUniqueId"],
            did=data["did"],
            connectivity_id=data["connectivityId"],
            key_handle=data["keyHandle"],
            cloud_key_slot=data.get("cloudKeySlot"),
        )


class KeyCustody(Protocol):
    """What the rest of the exchange needs from a key store.

    A remote KMS client can stand in for :class:`KeyStore` by providing
    these methods.
    """

    def generate_key(self) -> KeyRecord: ...

    def sign_with(self, key_handle: str, message: bytes) -> bytes: ...

    def public_key(self, key_handle: str) -> bytes: ...

    def map_identity(self, mapping: IdentityMapping) -> None: ...

    def lookup_by(self, field: str, value: str) -> IdentityMapping: ...


class _Journal:
    def __init__(self, path: Path, passphrase: str):
        self.path = path
        if path.exists() and path.stat().st_size:
            with path.open("rb") as fh:
                header = fh.read(len(_MAGIC) + _SALT_LEN)
            if not header.startswith(_MAGIC):
                raise KeystoreLocked(f"{path} is not a keystore file")
            salt = header[len(_MAGIC):]
        else:
            salt = os.urandom(_SALT_LEN)
            fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
            with os.fdopen(fd, "wb") as fh:
                fh.write(_MAGIC + salt)
        kdf = Scrypt(salt=salt, length=32, n=2**14, r=8, p=1)
        self._aead = AESGCM(kdf.derive(passphrase.encode("utf-8")))

    def append(self, record: dict) -> None:
        nonce = os.urandom(_NONCE_LEN)
        blob = nonce + self._aead.encrypt(nonce, canonicalize(record), _MAGIC)
        with self.path.open("ab") as fh:
            fh.write(struct.pack(">I", len(blob)) + blob)
            fh.flush()
            os.fsync(fh.fileno())

    def replay(self):
        data = self.path.read_bytes()
        pos = len(_MAGIC) + _SALT_LEN
        while pos < len(data):
            if pos + 4 > len(data):
                raise KeystoreLocked("truncated keystore record")
            (size,) = struct.unpack(">I", data[pos:pos + 4])
            blob = data[pos + 4:pos + 4 + size]
            if len(blob) != size:
                raise KeystoreLocked("truncated keystore record")
            try:
                plain = self._aead.decrypt(blob[:_NONCE_LEN], blob[_NONCE_LEN:], _MAGIC)
            except Exception as exc:  # InvalidTag carries no message
                raise KeystoreLocked("wrong passphrase or corrupted keystore") from exc
            yield json.loads(plain)
            pos += 4 + size


class KeyStore:
    def __init__(self, path: str | Path | None = None, passphrase: str | None = None, clock=None):
        self._keys: dict[str, Ed25519PrivateKey] = {}
        self._records: dict[str, KeyRecord] = {}
        self._mappings: dict[str, IdentityMapping] = {}
        self._index: dict[str, dict[str, str]] = {k: {} for k in LOOKUP_KEYS}
        self._lock = threading.RLock()
        self._clock = clock
        self._journal: _Journal | None = None
        if path is not None:
            passphrase = passphrase if passphrase is not None else os.environ.get(PASSPHRASE_ENV)
            if not passphrase:
                raise KeystoreLocked(f"{PASSPHRASE_ENV} must be set to open {path}")
            self._journal = _Journal(Path(path), passphrase)
            for rec in self._journal.replay():
                self._apply(rec)

    def __repr__(self) -> str:
        return f"KeyStore(keys={len(self._keys)}, mappings={len(self._mappings)})"

    def _now(self) -> int:
        if self._clock is not None:
            return self._clock.now()
        return int(time.time())

    def _apply(self, rec: dict) -> None:
        op = rec["op"]
        if op == "key":
            key = Ed25519PrivateKey.from_private_bytes(bytes.fromhex(rec["seed"]))
            self._keys[rec["handle"]] = key
            self._records[rec["handle"]] = KeyRecord(rec["handle"], raw_public(key), rec["createdAt"])
        elif op == "forget":
            self._keys.pop(rec["handle"], None)
            self._records.pop(rec["handle"], None)
        elif op == "map":
            self._index_mapping(IdentityMapping.from_dict(rec["mapping"]))
        elif op == "unmap":
            self._unindex(rec["deviceUniqueId"])

    def _write(self, rec: dict) -> None:
        if self._journal is not None:
            self._journal.append(rec)
        self._apply(rec)

    # keys

    def generate_key(self) -> KeyRecord:
        key = Ed25519PrivateKey.generate()
        with self._lock:
            handle = "kh_" + secrets.token_hex(16)
            while handle in self._keys:
                handle = "kh_" + secrets.token_hex(16)
            self._write({"op": "key", "handle": handle, "seed": raw_seed(key).hex(), "createdAt": self._now()})
            return self._records[handle]

    def key_record(self, key_handle: str) -> KeyRecord:
        try:
            return self._records[key_handle]
        except KeyError:
            raise UnknownKeyHandle(key_handle) from None

    def public_key(self, key_handle: str) -> bytes:
        return self.key_record(key_handle).public_key

    def sign_with(self, key_handle: str, message: bytes) -> bytes:
        key = self._keys.get(key_handle)
        if key is None:
            raise UnknownKeyHandle(key_handle)
        return key.sign(message)

    def forget_key(self, key_handle: str) -> None:
        """Destroy a key. Used to roll back a half-finished registration."""
        with self._lock:
            if any(m.key_handle == key_handle for m in self._mappings.values()):
                raise DanglingKeyHandle(f"{key_handle} is still mapped")
            if key_handle in self._keys:
                self._write({"op": "forget", "handle": key_handle})

    def signer(self, key_handle: str) -> "KeystoreSigner":
        self.key_record(key_handle)
        return KeystoreSigner(self, key_handle)

    # identity mappings

    def _index_mapping(self, m: IdentityMapping) -> None:
        self._mappings[m.device_unique_id] = m
        self._index["deviceUniqueId"][m.device_unique_id] = m.device_unique_id
        self._index["did"][m.did] = m.device_unique_id
        self._index["connectivityId"][m.connectivity_id] = m.device_unique_id

    def _unindex(self, device_unique_id: str) -> None:
        m = self._mappings.pop(device_unique_id, None)
        if m is not None:
            del self._index["deviceUniqueId"][m.device_unique_id]
            del self._index["did"][m.did]
            del self._index["connectivityId"][m.connectivity_id]

    def check_mapping(self, mapping: IdentityMapping, *, require_key: bool = True) -> None:
        for name, value in (
            ("deviceUniqueId", mapping.device_unique_id),
            ("did", mapping.did),
            ("connectivityId", mapping.connectivity_id),
        ):
            if value in self._index[name]:
                raise DuplicateIdentity(f"{name} {value!r} already mapped")
        if require_key and mapping.key_handle not in self._keys:
            raise DanglingKeyHandle(mapping.key_handle)

    def map_identity(self, mapping: IdentityMapping) -> None:
        with self._lock:
            self.check_mapping(mapping)
            self._write({"op": "map", "mapping": mapping.to_dict()})

    def unmap_identity(self, device_unique_id: str) -> None:
        with self._lock:
            if device_unique_id in self._mappings:
                self._write({"op": "unmap", "deviceUniqueId": device_unique_id})

    def lookup_by(self, field: str, value: str) -> IdentityMapping:
        if field not in LOOKUP_KEYS:
            raise ValueError(f"lookup field must be one of {LOOKUP_KEYS}")
        serial = self._index[field].get(value)
        if serial is None:
            raise NotFound(f"no mapping with {field} {value!r}")
        return self._mappings[serial]

    def mappings(self) -> list[IdentityMapping]:
        return list(self._mappings.values())


class KeystoreSigner:
    """Signer facade over a stored key; exposes only the public half."""

    def __init__(self, store: KeyCustody, key_handle: str):
        self._store = store
        self.key_handle = key_handle
        self._public = store.public_key(key_handle)

    @property
    def public_key(self) -> bytes:
        return self._public

    def sign(self, message: bytes) -> bytes:
        return self._store.sign_with(self.key_handle, message)

