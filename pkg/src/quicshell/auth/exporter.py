"""Conversation identifiers from TLS 1.3 exported keying material."""

from __future__ import annotations

import base64
import hashlib
from typing import Callable, Optional

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDFExpand

EXPORTER_LABEL = b"EXPORTER-SSH3"
CONVERSATION_ID_SIZE = 32

Exporter = Callable[[bytes, bytes, int], bytes]


class ExporterUnavailable(RuntimeError):
    """Keying material cannot be exported before the handshake completes."""


class ConversationId(bytes):
    def __new__(cls, value: bytes):
        if len(value) != CONVERSATION_ID_SIZE:
            raise ValueError(f"conversation id must be {CONVERSATION_ID_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def b64(self) -> str:
        return base64.b64encode(self).decode("ascii")

    @classmethod
    def from_b64(cls, text: str) -> "ConversationId":
        return cls(base64.b64decode(text, validate=True))

    def __repr__(self):
        return f"ConversationId({self.hex()[:16]}...)"


def derive_conversation_id(exporter: Optional[Exporter]) -> ConversationId:
    if exporter is None:
        raise ExporterUnavailable("no exporter")
    value = exporter(EXPORTER_LABEL, b"", CONVERSATION_ID_SIZE)
    if value is None:
        raise ExporterUnavailable("handshake incomplete")
    return ConversationId(value)


_HASHES = {
    "sha256": hashes.SHA256,
    "sha384": hashes.SHA384,
}


def hkdf_expand_label(hash_name: str, secret: bytes, label: bytes, context: bytes, length: int) -> bytes:
    full = b"tls13 " + label
    info = length.to_bytes(2, "big") + bytes([len(full)]) + full + bytes([len(context)]) + context
    return HKDFExpand(_HASHES[hash_name](), length, info).derive(secret)


def tls13_export(hash_name: str, exporter_master_secret: bytes, label: bytes, context: bytes,
                 length: int) -> bytes:
    """The TLS 1.3 exporter computed from the exporter master secret."""
    h = hashlib.new(hash_name)
    empty = hashlib.new(hash_name).digest()
    secret = hkdf_expand_label(hash_name, exporter_master_secret, label, empty, h.digest_size)
    return hkdf_expand_label(hash_name, secret, b"exporter", hashlib.new(hash_name, context).digest(), length)
