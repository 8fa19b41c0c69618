"""Client-side credentials and the Authorization header they produce."""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import jwt
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, rsa

from .exporter import ConversationId
from .store import pubkey_text

JWT_AUDIENCE = "ssh3"
JWT_LIFETIME = 10


@dataclass(frozen=True)
class Password:
    username: str
    password: str = field(repr=False)


@dataclass(frozen=True)
class OidcToken:
    raw_jwt: str = field(repr=False)


@dataclass(frozen=True)
class PrivateKey:
    username: str
    key: object = field(repr=False)
    algorithm: Optional[str] = None

    def __post_init__(self):
        if self.algorithm is None:
            object.__setattr__(self, "algorithm", key_algorithm(self.key))

    def public_key_text(self) -> str:
        return pubkey_text(self.key.public_key())


Credential = Union[Password, OidcToken, PrivateKey]


def key_algorithm(key) -> str:
    """JWT ``alg`` name for a private or public key object."""
    if isinstance(key, (ed25519.Ed25519PrivateKey, ed25519.Ed25519PublicKey)):
        return "EdDSA"
    if isinstance(key, (rsa.RSAPrivateKey, rsa.RSAPublicKey)):
        return "RS256"
    raise TypeError(f"unsupported key type {type(key).__name__}")


def load_private_key(path, passphrase: Optional[bytes] = None):
    """Load an Ed25519 or RSA private key in OpenSSH or PEM form."""
    with open(path, "rb") as fh:
        data = fh.read()
    if b"OPENSSH PRIVATE KEY" in data:
        key = serialization.load_ssh_private_key(data, passphrase)
    else:
        key = serialization.load_pem_private_key(data, passphrase)
    key_algorithm(key)
    return key


def credential_username(cred: Credential) -> Optional[str]:
    return getattr(cred, "username", None)


def mint_pubkey_jwt(cred: PrivateKey, sid: ConversationId, now: float) -> str:
    iat = int(now)
    claims = {
        "iss": cred.username,
        "aud": JWT_AUDIENCE,
        "iat": iat,
        "exp": iat + JWT_LIFETIME,
        "pubkey": cred.public_key_text(),
        "sid": ConversationId(sid).b64(),
    }
    return jwt.encode(claims, cred.key, algorithm=cred.algorithm)


def build_authorization_header(cred: Credential, sid: Optional[bytes] = None,
                               now: Optional[float] = None) -> str:
    if isinstance(cred, Password):
        if not cred.username:
            raise ValueError("username must be non-empty")
        if ":" in cred.username:
            raise ValueError("username must not contain ':' with Basic authentication")
        token = base64.b64encode(f"{cred.username}:{cred.password}".encode("utf-8")).decode("ascii")
        return "Basic " + token
    if isinstance(cred, OidcToken):
        if not cred.raw_jwt or cred.raw_jwt.count(".") != 2:
            raise ValueError("OIDC token must be a compact JWT")
        return "Bearer " + cred.raw_jwt
    if isinstance(cred, PrivateKey):
        if not cred.username:
            raise ValueError("username must be non-empty")
        if sid is None:
            raise ValueError("public-key authentication needs the conversation id")
        return "Bearer " + mint_pubkey_jwt(cred, sid, time.time() if now is None else now)
    raise TypeError(f"unknown credential {type(cred).__name__}")
