"""Server-side verification of the Basic and Bearer schemes."""

from __future__ import annotations

import base64
import binascii
import enum
import hmac
import logging
import time
from dataclasses import dataclass
from typing import Optional

import jwt
from cryptography.hazmat.primitives.asymmetric import ec, ed25519, rsa

from .credentials import JWT_AUDIENCE, key_algorithm
from .exporter import ConversationId
from .oidc import KeySet, ProviderError, ProviderKeyCache
from .store import IdentityStore, PasswordHash, hash_password, parse_pubkey_line

log = logging.getLogger(__name__)


class Reason(str, enum.Enum):
    MISSING_AUTHORIZATION = "missing-authorization"
    SCHEME_NOT_ENABLED = "scheme-not-enabled"
    MALFORMED = "malformed"
    USERNAME_MISMATCH = "username-mismatch"
    UNKNOWN_USER = "unknown-user"
    WRONG_PASSWORD = "wrong-password"
    KEY_NOT_AUTHORIZED = "key-not-authorized"
    BAD_SIGNATURE = "bad-signature"
    SESSION_MISMATCH = "session-mismatch"
    EXPIRED = "expired"
    NOT_YET_VALID = "not-yet-valid"
    ISSUER_MISMATCH = "issuer-mismatch"
    AUDIENCE_MISMATCH = "audience-mismatch"
    UNKNOWN_KEY_ID = "unknown-key-id"
    IDENTITY_NOT_AUTHORIZED = "identity-not-authorized"
    PROVIDER_UNREACHABLE = "provider-unreachable"

    def __str__(self):
        return self.value


# configuration name -> HTTP scheme name
SCHEMES = {"password": "Basic", "pubkey": "Bearer", "oidc": "Bearer"}
ENTRY_SCHEME = {"PasswordHash": "Basic", "AuthorizedPubkey": "Bearer", "OidcIdentity": "Bearer"}


@dataclass(frozen=True)
class AuthDecision:
    accepted: bool
    username: Optional[str] = None
    schemes: tuple = ()
    reason: Optional[Reason] = None

    @classmethod
    def accept(cls, username: str) -> "AuthDecision":
        return cls(True, username)

    @classmethod
    def reject(cls, schemes, reason: Reason) -> "AuthDecision":
        schemes = tuple(dict.fromkeys(schemes))
        if not schemes:
            raise ValueError("a rejection must advertise at least one scheme")
        return cls(False, None, schemes, Reason(reason))


def user_schemes(store: IdentityStore, username: str, enabled=("Basic", "Bearer")) -> tuple:
    """Scheme names to advertise to ``username``."""
    own = [ENTRY_SCHEME[type(e).__name__] for e in store.entries(username)]
    own = [s for s in dict.fromkeys(own) if s in enabled]
    return tuple(own) or tuple(dict.fromkeys(enabled))


def split_authorization(header: str) -> tuple[str, str]:
    scheme, _, param = header.strip().partition(" ")
    return scheme.lower(), param.strip()


# A throwaway hash keeps unknown-user rejections as slow as wrong passwords.
_DUMMY: Optional[PasswordHash] = None


def _dummy_hash() -> PasswordHash:
    global _DUMMY
    if _DUMMY is None:
        _DUMMY = hash_password("dummy", salt=b"\0" * 16)
    return _DUMMY


def verify_basic(header: str, store: IdentityStore, claimed_user: str, enabled=("Basic",)) -> AuthDecision:
    schemes = user_schemes(store, claimed_user, enabled)
    scheme, param = split_authorization(header)
    if scheme != "basic":
        return AuthDecision.reject(schemes, Reason.MALFORMED)
    try:
        decoded = base64.b64decode(param, validate=True).decode("utf-8")
    except (binascii.Error, UnicodeDecodeError, ValueError):
        return AuthDecision.reject(schemes, Reason.MALFORMED)
    username, sep, password = decoded.partition(":")
    if not sep or not username:
        return AuthDecision.reject(schemes, Reason.MALFORMED)
    if not hmac.compare_digest(username.encode("utf-8"), claimed_user.encode("utf-8")):
        return AuthDecision.reject(schemes, Reason.USERNAME_MISMATCH)
    entries = store.passwords(claimed_user)
    if not entries:
        _dummy_hash().verify(password)
        return AuthDecision.reject(schemes, Reason.UNKNOWN_USER if claimed_user not in store
                                   else Reason.IDENTITY_NOT_AUTHORIZED)
    ok = False
    for entry in entries:
        ok |= entry.verify(password)
    if ok:
        return AuthDecision.accept(claimed_user)
    return AuthDecision.reject(schemes, Reason.WRONG_PASSWORD)


def _allowed_algorithms(key) -> list[str]:
    if isinstance(key, (ed25519.Ed25519PublicKey,)):
        return ["EdDSA"]
    if isinstance(key, rsa.RSAPublicKey):
        return ["RS256"]
    if isinstance(key, ec.EllipticCurvePublicKey):
        return ["ES256"]
    return []


def _verify_signature(token: str, key, algorithms) -> Optional[Reason]:
    try:
        jwt.decode(token, key, algorithms=list(algorithms), options={
            "verify_signature": True, "verify_exp": False, "verify_nbf": False, "verify_iat": False,
            "verify_aud": False, "verify_iss": False, "require": []})
    except (jwt.InvalidSignatureError, jwt.InvalidAlgorithmError):
        return Reason.BAD_SIGNATURE
    except jwt.PyJWTError:
        return Reason.MALFORMED
    return None


def unverified_claims(token: str) -> tuple[dict, dict]:
    """Header and claims without checking anything. Raises ``jwt.DecodeError``."""
    header = jwt.get_unverified_header(token)
    claims = jwt.decode(token, options={"verify_signature": False})
    if not isinstance(claims, dict):
        raise jwt.DecodeError("claims are not an object")
    return header, claims


def _int_claim(claims: dict, name: str) -> Optional[int]:
    v = claims.get(name)
    return v if isinstance(v, (int, float)) and not isinstance(v, bool) else None


def verify_pubkey_jwt(token: str, store: IdentityStore, claimed_user: str, sid: bytes,
                      now: float) -> AuthDecision:
    schemes = user_schemes(store, claimed_user, ("Bearer",))
    reject = lambda reason: AuthDecision.reject(schemes, reason)  # noqa: E731
    try:
        header, claims = unverified_claims(token)
    except jwt.PyJWTError:
        return reject(Reason.MALFORMED)
    pubkey = claims.get("pubkey")
    if not isinstance(pubkey, str):
        return reject(Reason.MALFORMED)
    try:
        presented = parse_pubkey_line(pubkey)
    except (ValueError, TypeError):
        return reject(Reason.MALFORMED)
    if claimed_user not in store:
        return reject(Reason.UNKNOWN_USER)
    match = None
    for entry in store.pubkeys(claimed_user):
        if entry.key_type == presented.key_type and hmac.compare_digest(entry.blob, presented.blob):
            match = entry
    if match is None:
        return reject(Reason.KEY_NOT_AUTHORIZED)
    key = match.public_key()
    bad = _verify_signature(token, key, [key_algorithm(key)])
    if bad:
        return reject(bad)
    try:
        presented_sid = base64.b64decode(claims.get("sid", ""), validate=True)
    except (binascii.Error, ValueError, TypeError):
        return reject(Reason.MALFORMED)
    if len(presented_sid) != 32:
        return reject(Reason.MALFORMED)
    if not hmac.compare_digest(presented_sid, ConversationId(sid)):
        return reject(Reason.SESSION_MISMATCH)
    iat, exp = _int_claim(claims, "iat"), _int_claim(claims, "exp")
    if iat is None or exp is None or exp <= iat:
        return reject(Reason.MALFORMED)
    if now < iat:
        return reject(Reason.NOT_YET_VALID)
    if now >= exp:
        return reject(Reason.EXPIRED)
    if claims.get("iss") != claimed_user:
        return reject(Reason.ISSUER_MISMATCH)
    if claims.get("aud") != JWT_AUDIENCE:
        return reject(Reason.AUDIENCE_MISMATCH)
    return AuthDecision.accept(claimed_user)


def _audience_ok(aud, expected: str) -> bool:
    if isinstance(aud, str):
        return aud == expected
    if isinstance(aud, list):
        return expected in aud
    return False


def verify_oidc_token(token: str, provider_keys: KeySet, expected_issuer: str, expected_audience: str,
                      store: IdentityStore, claimed_user: str, now: float) -> AuthDecision:
    schemes = user_schemes(store, claimed_user, ("Bearer",))
    reject = lambda reason: AuthDecision.reject(schemes, reason)  # noqa: E731
    try:
        header, claims = unverified_claims(token)
    except jwt.PyJWTError:
        return reject(Reason.MALFORMED)
    jwk = provider_keys.find(header.get("kid"))
    if jwk is None:
        return reject(Reason.UNKNOWN_KEY_ID)
    algorithms = [jwk.algorithm_name] if jwk.algorithm_name else _allowed_algorithms(jwk.key)
    bad = _verify_signature(token, jwk.key, algorithms)
    if bad:
        return reject(bad)
    if str(claims.get("iss", "")).rstrip("/") != expected_issuer.rstrip("/"):
        return reject(Reason.ISSUER_MISMATCH)
    if not _audience_ok(claims.get("aud"), expected_audience):
        return reject(Reason.AUDIENCE_MISMATCH)
    exp = _int_claim(claims, "exp")
    if exp is None:
        return reject(Reason.MALFORMED)
    if now >= exp:
        return reject(Reason.EXPIRED)
    nbf = _int_claim(claims, "nbf")
    if nbf is not None and now < nbf:
        return reject(Reason.NOT_YET_VALID)
    email = claims.get("email")
    if not isinstance(email, str) or claims.get("email_verified") is False:
        return reject(Reason.IDENTITY_NOT_AUTHORIZED)
    issuer = expected_issuer.rstrip("/")
    for entry in store.oidc(claimed_user):
        if entry.issuer == issuer and entry.email.lower() == email.lower():
            return AuthDecision.accept(claimed_user)
    return reject(Reason.IDENTITY_NOT_AUTHORIZED)


def is_pubkey_jwt(claims: dict) -> bool:
    return "pubkey" in claims and claims.get("aud") == JWT_AUDIENCE


class Authenticator:
    """Dispatches an Authorization header to the right verifier.

    ``calls`` counts every invocation so tests can prove that requests
    rejected before authentication never reach this code.
    """

    def __init__(self, store: IdentityStore, schemes=("password", "pubkey", "oidc"),
                 key_cache: Optional[ProviderKeyCache] = None, oidc_audience: Optional[str] = None,
                 clock=time.time):
        unknown = set(schemes) - set(SCHEMES)
        if unknown or not schemes:
            raise ValueError(f"unknown or empty scheme list: {sorted(unknown)}")
        self.store = store
        self.schemes = tuple(schemes)
        self.key_cache = key_cache if key_cache is not None else ProviderKeyCache()
        self.oidc_audience = oidc_audience
        self.clock = clock
        self.calls = 0

    @property
    def http_schemes(self) -> tuple:
        return tuple(dict.fromkeys(SCHEMES[s] for s in self.schemes))

    def advertised(self, username: str) -> tuple:
        return user_schemes(self.store, username, self.http_schemes)

    def authenticate(self, authorization: Optional[str], claimed_user: str, sid: bytes) -> AuthDecision:
        self.calls += 1
        schemes = self.advertised(claimed_user)
        if not authorization:
            return AuthDecision.reject(schemes, Reason.MISSING_AUTHORIZATION)
        scheme, param = split_authorization(authorization)
        now = self.clock()
        if scheme == "basic" and "password" in self.schemes:
            return verify_basic(authorization, self.store, claimed_user, self.http_schemes)
        if scheme != "bearer" or not ({"pubkey", "oidc"} & set(self.schemes)):
            return AuthDecision.reject(schemes, Reason.SCHEME_NOT_ENABLED)
        try:
            _, claims = unverified_claims(param)
        except jwt.PyJWTError:
            return AuthDecision.reject(schemes, Reason.MALFORMED)
        if is_pubkey_jwt(claims):
            if "pubkey" not in self.schemes:
                return AuthDecision.reject(schemes, Reason.SCHEME_NOT_ENABLED)
            return verify_pubkey_jwt(param, self.store, claimed_user, sid, now)
        if "oidc" not in self.schemes or not self.oidc_audience:
            return AuthDecision.reject(schemes, Reason.SCHEME_NOT_ENABLED)
        issuer = str(claims.get("iss", "")).rstrip("/")
        if not any(e.issuer == issuer for e in self.store.oidc(claimed_user)):
            return AuthDecision.reject(schemes, Reason.IDENTITY_NOT_AUTHORIZED)
        try:
            keys = self.key_cache.get(issuer)
        except ProviderError:
            return AuthDecision.reject(schemes, Reason.PROVIDER_UNREACHABLE)
        return verify_oidc_token(param, keys, issuer, self.oidc_audience, self.store, claimed_user, now)
