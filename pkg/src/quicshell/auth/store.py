"""Server-side identity store.

The file is made of ``[user <name>]`` sections, each followed by entry
lines::

    [user alice]
    password-hash scrypt-16384-8-1:<b64 salt>:<b64 hash>
    pubkey ssh-ed25519 AAAAC3Nz... alice@laptop
    oidc https://accounts.example.com alice@example.com

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Optional, Union

from cryptography.exceptions import UnsupportedAlgorithm
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, rsa

log = logging.getLogger(__name__)

SCRYPT_DEFAULT = (1 << 14, 8, 1)
_SECTION = re.compile(r"^\[user\s+(\S+)\s*\]$")


class StoreError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class PasswordHash:
    scheme_id: str
    salt: bytes
    hash: bytes = field(repr=False)

    def verify(self, password: str) -> bool:
        candidate = _scrypt(self.scheme_id, password.encode("utf-8"), self.salt, len(self.hash))
        return hmac.compare_digest(candidate, self.hash)

    def serialize(self) -> str:
        return "password-hash {}:{}:{}".format(
            self.scheme_id, base64.b64encode(self.salt).decode(), base64.b64encode(self.hash).decode())


@dataclass(frozen=True)
class AuthorizedPubkey:
    key_type: str
    blob: bytes
    comment: str = ""

    @property
    def key_text(self) -> str:
        return f"{self.key_type} {base64.b64encode(self.blob).decode()}"

    def public_key(self):
        return serialization.load_ssh_public_key(self.key_text.encode())

    def serialize(self) -> str:
        return f"pubkey {self.key_text}" + (f" {self.comment}" if self.comment else "")


@dataclass(frozen=True)
class OidcIdentity:
    issuer: str
    email: str

    def serialize(self) -> str:
        return f"oidc {self.issuer} {self.email}"


Entry = Union[PasswordHash, AuthorizedPubkey, OidcIdentity]


def _parse_scheme(scheme_id: str) -> tuple[int, int, int]:
    m = re.fullmatch(r"scrypt-(\d+)-(\d+)-(\d+)", scheme_id)
    if not m:
        raise ValueError(f"unsupported password hash scheme {scheme_id!r}")
    n, r, p = (int(g) for g in m.groups())
    if n < 2 or n & (n - 1):
        raise ValueError("scrypt N must be a power of two")
    return n, r, p


def _scrypt(scheme_id: str, secret: bytes, salt: bytes, length: int) -> bytes:
    n, r, p = _parse_scheme(scheme_id)
    return hashlib.scrypt(secret, salt=salt, n=n, r=r, p=p, maxmem=256 * n * r + (1 << 20), dklen=length)


def hash_password(password: str, *, salt: Optional[bytes] = None, cost=SCRYPT_DEFAULT) -> PasswordHash:
    scheme_id = "scrypt-{}-{}-{}".format(*cost)
    salt = os.urandom(16) if salt is None else salt
    return PasswordHash(scheme_id, salt, _scrypt(scheme_id, password.encode("utf-8"), salt, 32))


def parse_pubkey_line(text: str) -> AuthorizedPubkey:
    """Parse an authorized-keys style line (``type base64 [comment]``)."""
    parts = text.strip().split(None, 2)
    if len(parts) < 2:
        raise ValueError("expected '<type> <base64> [comment]'")
    key_type, b64 = parts[0], parts[1]
    try:
        blob = base64.b64decode(b64, validate=True)
        key = serialization.load_ssh_public_key(f"{key_type} {b64}".encode())
    except (binascii.Error, ValueError) as exc:
        raise ValueError(f"malformed public key: {exc}") from None
    except UnsupportedAlgorithm:
        raise TypeError(f"unsupported key type {key_type}") from None
    if not isinstance(key, (ed25519.Ed25519PublicKey, rsa.RSAPublicKey)):
        raise TypeError(f"unsupported key type {key_type}")
    return AuthorizedPubkey(key_type, blob, parts[2] if len(parts) > 2 else "")


def pubkey_text(public_key) -> str:
    """Authorized-keys text for a cryptography public key object."""
    return public_key.public_bytes(serialization.Encoding.OpenSSH,
                                   serialization.PublicFormat.OpenSSH).decode()


class IdentityStore:
    """Immutable mapping of usernames to their authorized entries."""

    def __init__(self, users: Optional[dict[str, list[Entry]]] = None):
        self._users = {name: tuple(entries) for name, entries in (users or {}).items()}

    def __contains__(self, username: str) -> bool:
        return username in self._users

    def __len__(self) -> int:
        return len(self._users)

    def users(self) -> list[str]:
        return list(self._users)

    def entries(self, username: str) -> tuple[Entry, ...]:
        return self._users.get(username, ())

    def passwords(self, username: str) -> list[PasswordHash]:
        return [e for e in self.entries(username) if isinstance(e, PasswordHash)]

    def pubkeys(self, username: str) -> list[AuthorizedPubkey]:
        return [e for e in self.entries(username) if isinstance(e, AuthorizedPubkey)]

    def oidc(self, username: str) -> list[OidcIdentity]:
        return [e for e in self.entries(username) if isinstance(e, OidcIdentity)]

    def serialize(self) -> str:
        out = []
        for name, entries in self._users.items():
            out.append(f"[user {name}]")
            out.extend(e.serialize() for e in entries)
            out.append("")
        return "\n".join(out)


def _parse_entry(kind: str, rest: str) -> Entry:
    if kind == "password-hash":
        parts = rest.split(":")
        if len(parts) != 3:
            raise ValueError("expected '<scheme-id>:<b64 salt>:<b64 hash>'")
        _parse_scheme(parts[0])
        try:
            salt = base64.b64decode(parts[1], validate=True)
            digest = base64.b64decode(parts[2], validate=True)
        except binascii.Error as exc:
            raise ValueError(f"bad base64: {exc}") from None
        if not digest:
            raise ValueError("empty hash")
        return PasswordHash(parts[0], salt, digest)
    if kind == "pubkey":
        return parse_pubkey_line(rest)
    if kind == "oidc":
        parts = rest.split()
        if len(parts) != 2 or not parts[0].startswith(("https://", "http://")) or "@" not in parts[1]:
            raise ValueError("expected 'oidc <issuer-url> <email>'")
        return OidcIdentity(parts[0].rstrip("/"), parts[1])
    raise KeyError(kind)


def parse_identity_store(data: Union[bytes, str]) -> IdentityStore:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    users: dict[str, list[Entry]] = {}
    current: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _SECTION.match(line)
        if m:
            current = m.group(1)
            if current in users:
                raise StoreError(f"duplicate section for user {current!r}", lineno)
            users[current] = []
            continue
        if line.startswith("["):
            raise StoreError(f"malformed section header {line!r}", lineno)
        kind, _, rest = line.partition(" ")
        if current is None:
            raise StoreError("entry outside of a [user ...] section", lineno)
        try:
            users[current].append(_parse_entry(kind, rest.strip()))
        except KeyError:
            log.warning("identity store line %d: skipping unknown entry kind %r", lineno, kind)
        except TypeError as exc:
            log.warning("identity store line %d: skipping entry: %s", lineno, exc)
        except ValueError as exc:
            raise StoreError(f"{kind}: {exc}", lineno) from None
    for name in [n for n, entries in users.items() if not entries]:
        log.warning("identity store: user %r has no usable entries", name)
        del users[name]
    return IdentityStore(users)


def load_identity_store(path) -> IdentityStore:
    with open(path, "rb") as fh:
        return parse_identity_store(fh.read())
