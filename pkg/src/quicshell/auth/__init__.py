from .credentials import (
    Credential, OidcToken, Password, PrivateKey, build_authorization_header, load_private_key,
    mint_pubkey_jwt,
)
from .exporter import (
    ConversationId, ExporterUnavailable, derive_conversation_id, tls13_export,
)
from .oidc import KeySet, ProviderError, ProviderKeyCache, ProviderUnreachable, fetch_provider_keys, parse_jwks
from .store import (
    AuthorizedPubkey, IdentityStore, OidcIdentity, PasswordHash, StoreError, hash_password,
    load_identity_store, parse_identity_store, pubkey_text,
)
from .verify import (
    AuthDecision, Authenticator, Reason, verify_basic, verify_oidc_token, verify_pubkey_jwt,
)

__all__ = [
    "AuthDecision", "Authenticator", "AuthorizedPubkey", "ConversationId", "Credential",
    "ExporterUnavailable", "IdentityStore", "KeySet", "OidcIdentity", "OidcToken", "Password",
    "PasswordHash", "PrivateKey", "ProviderError", "ProviderKeyCache", "ProviderUnreachable", "Reason",
    "StoreError", "build_authorization_header", "derive_conversation_id", "fetch_provider_keys",
    "hash_password", "load_identity_store", "load_private_key", "mint_pubkey_jwt", "parse_identity_store",
    "parse_jwks", "pubkey_text", "tls13_export", "verify_basic", "verify_oidc_token", "verify_pubkey_jwt",
]
