"""OpenID provider key discovery with a small TTL cache."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Optional

import httpx
import jwt

log = logging.getLogger(__name__)

KEY_TTL = 300.0


class ProviderError(RuntimeError):
    pass


class ProviderUnreachable(ProviderError):
    pass


@dataclass(frozen=True)
class KeySet:
    keys: tuple  # of jwt.PyJWK

    def find(self, kid: Optional[str]):
        if kid is None:
            return self.keys[0] if len(self.keys) == 1 else None
        for k in self.keys:
            if k.key_id == kid:
                return k
        return None

    def __len__(self):
        return len(self.keys)


def parse_jwks(document) -> KeySet:
    """Parse a JWKS document; any unusable key rejects the whole set."""
    if not isinstance(document, dict) or not isinstance(document.get("keys"), list) or not document["keys"]:
        raise ProviderError("JWKS document has no 'keys' list")
    keys = []
    for entry in document["keys"]:
        if not isinstance(entry, dict):
            raise ProviderError("JWKS entry is not an object")
        if entry.get("use", "sig") != "sig":
            continue
        try:
            keys.append(jwt.PyJWK(entry))
        except (jwt.PyJWKError, jwt.InvalidKeyError, ValueError, TypeError, KeyError) as exc:
            raise ProviderError(f"malformed JWKS key: {exc}") from None
    if not keys:
        raise ProviderError("JWKS document has no signing keys")
    return KeySet(tuple(keys))


def fetch_provider_keys(issuer: str, client: Optional[httpx.Client] = None, timeout: float = 5.0) -> KeySet:
    """Discovery document, then its ``jwks_uri``."""
    own = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        discovery = client.get(issuer.rstrip("/") + "/.well-known/openid-configuration")
        discovery.raise_for_status()
        meta = discovery.json()
        if not isinstance(meta, dict) or "jwks_uri" not in meta:
            raise ProviderError("discovery document lacks jwks_uri")
        resp = client.get(meta["jwks_uri"])
        resp.raise_for_status()
        return parse_jwks(resp.json())
    except httpx.HTTPError as exc:
        raise ProviderUnreachable(f"{issuer}: {exc}") from None
    except ValueError as exc:
        raise ProviderError(f"{issuer}: invalid JSON: {exc}") from None
    finally:
        if own:
            client.close()


class ProviderKeyCache:
    """Per-issuer key sets, refreshed after ``ttl`` seconds.

    A failed refresh falls back to the previously cached keys.
    """

    def __init__(self, ttl: float = KEY_TTL, clock=time.monotonic, client: Optional[httpx.Client] = None,
                 fetch=fetch_provider_keys):
        self.ttl = ttl
        self._clock = clock
        self._client = client
        self._fetch = fetch
        self._lock = threading.Lock()
        self._entries: dict[str, tuple[float, KeySet]] = {}
        self.fetches = 0

    def get(self, issuer: str) -> KeySet:
        issuer = issuer.rstrip("/")
        with self._lock:
            cached = self._entries.get(issuer)
            if cached and self._clock() - cached[0] < self.ttl:
                return cached[1]
            self.fetches += 1
            try:
                keys = self._fetch(issuer, self._client)
            except ProviderError as exc:
                if cached:
                    log.warning("key refresh for %s failed, using cached keys: %s", issuer, exc)
                    return cached[1]
                raise ProviderUnreachable(str(exc)) from None
            self._entries[issuer] = (self._clock(), keys)
            return keys

    def put(self, issuer: str, keys: KeySet) -> None:
        with self._lock:
            self._entries[issuer.rstrip("/")] = (self._clock(), keys)
