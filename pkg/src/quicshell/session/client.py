"""Client endpoint: QUIC handshake, Extended CONNECT and authorization."""

from __future__ import annotations

import asyncio
import logging
import socket
import time
from dataclasses import dataclass
from typing import Optional
from urllib.parse import quote

from aioquic.h3.events import DataReceived, H3Event, HeadersReceived
from aioquic.quic.connection import QuicConnection
from aioquic.quic.events import HandshakeCompleted
from cryptography.hazmat.primitives import serialization

from ..auth.credentials import Credential, build_authorization_header
from ..auth.exporter import derive_conversation_id
from ..tlsutil import fingerprint, normalize_fingerprint
from .conversation import Conversation
from .errors import AuthenticationError, ConnectionSetupError, PathNotFound, SessionError, TransportError
from .protocol import ConversationProtocol
from .server import MAX_CHANNELS_HEADER, PROTOCOL_TOKEN
from .transport import TransportOptions, quic_configuration, tune_socket

log = logging.getLogger(__name__)


@dataclass
class Trust:
    """How the client authenticates the server certificate.

    ``cafile`` trusts a CA bundle (or a self-signed certificate directly);
    ``pin`` accepts exactly the certificate with that SHA-256 fingerprint.
    With neither, the system trust store is used.
    """

    cafile: Optional[str] = None
    pin: Optional[str] = None


def parse_www_authenticate(value: str) -> tuple:
    schemes = []
    for part in value.split(","):
        token = part.strip().split(" ", 1)[0]
        if token and "=" not in token:
            schemes.append(token)
    return tuple(dict.fromkeys(schemes))


class ClientProtocol(ConversationProtocol):
    is_client = True

    def __init__(self, quic, stream_handler=None, *, options=None, pin: Optional[str] = None):
        super().__init__(quic, stream_handler, options=options)
        self._pin = normalize_fingerprint(pin) if pin else None
        self._ready = self._loop.create_future()
        self._responses: dict[int, asyncio.Future] = {}
        self.conversation: Optional[Conversation] = None

    def conversation_for(self, session_stream_id: int):
        conv = self.conversation
        return conv if conv is not None and conv.session_stream_id == session_stream_id else None

    def quic_event_received(self, event) -> None:
        if isinstance(event, HandshakeCompleted) and self._pin:
            der = self.quic.tls._peer_certificate.public_bytes(serialization.Encoding.DER)
            if fingerprint(der) != self._pin:
                self._fail_ready(ConnectionSetupError("server certificate does not match the pinned fingerprint"))
                self.close_connection(0x0100, "certificate pin mismatch")
                return
        super().quic_event_received(event)
        self._check_ready()

    def _check_ready(self) -> None:
        if self._ready.done() or not self.quic._handshake_complete:
            return
        if self.h3 is None or self.h3.received_settings is None:
            return
        if not self.extended_connect_enabled():
            self._fail_ready(ConnectionSetupError("server does not support Extended CONNECT"))
        elif not self.datagrams_enabled:
            self._fail_ready(ConnectionSetupError("server did not negotiate HTTP/3 datagrams"))
        else:
            self._ready.set_result(None)

    def _fail_ready(self, exc: Exception) -> None:
        if not self._ready.done():
            self._ready.set_exception(exc)

    def h3_event_received(self, event: H3Event) -> None:
        if isinstance(event, HeadersReceived):
            fut = self._responses.get(event.stream_id)
            if fut is not None and not fut.done():
                fut.set_result(event.headers)
                return
        if isinstance(event, DataReceived) and event.stream_ended and self.conversation is not None:
            if event.stream_id == self.conversation.session_stream_id:
                self.close_connection(0, "server ended the conversation")
                return
        super().h3_event_received(event)

    def _on_terminated(self, reason: str) -> None:
        super()._on_terminated(reason)
        self._fail_ready(TransportError(f"connection closed during setup: {reason}"))
        for fut in self._responses.values():
            if not fut.done():
                fut.set_exception(TransportError(f"connection closed: {reason}"))
        if self.conversation is not None:
            self.conversation._terminated(reason)
        if self._transport is not None:
            self._loop.call_soon(self._transport.close)

    async def send_connect(self, authority: str, path: str, authorization: str) -> list:
        stream_id = self.quic.get_next_available_stream_id()
        fut = self._responses[stream_id] = self._loop.create_future()
        self.h3.send_headers(stream_id, [
            (b":method", b"CONNECT"),
            (b":protocol", PROTOCOL_TOKEN),
            (b":scheme", b"https"),
            (b":authority", authority.encode()),
            (b":path", path.encode()),
            (b"authorization", authorization.encode("latin-1")),
            (b"user-agent", b"quicshell"),
        ], end_stream=False)
        self.transmit()
        headers = await fut
        return stream_id, headers


async def _resolve(host: str, port: int):
    loop = asyncio.get_running_loop()
    infos = await loop.getaddrinfo(host, port, type=socket.SOCK_DGRAM)
    if not infos:
        raise ConnectionSetupError(f"cannot resolve {host}")
    family, _, _, _, addr = infos[0]
    return family, addr


async def client_open_conversation(host: str, port: int, path: str, username: str, credential: Credential, *,
                                   clock=time.time, trust: Optional[Trust] = None,
                                   options: Optional[TransportOptions] = None,
                                   server_name: Optional[str] = None, timeout: float = 10.0) -> Conversation:
    """Connect, authenticate and return the open conversation.

    Raises :class:`AuthenticationError` on 401, :class:`PathNotFound` on
    404 and :class:`ConnectionSetupError` / :class:`TransportError` for
    TLS and transport failures.
    """
    trust = trust or Trust()
    options = options or TransportOptions()
    loop = asyncio.get_running_loop()
    family, addr = await _resolve(host, port)
    cfg = quic_configuration(is_client=True, options=options, cafile=trust.cafile, verify=trust.pin is None,
                             server_name=server_name or host)
    sock = socket.socket(family, socket.SOCK_DGRAM)
    tune_socket(sock, options.socket_buffer)
    sock.setblocking(False)
    sock.connect(addr)
    quic = QuicConnection(configuration=cfg)
    transport, protocol = await loop.create_datagram_endpoint(
        lambda: ClientProtocol(quic, options=options, pin=trust.pin), sock=sock)
    protocol.peer_address = addr
    try:
        protocol.connect(addr)
        await asyncio.wait_for(asyncio.shield(protocol._ready), timeout)
        sid = derive_conversation_id(protocol.instrumentation.export)
        authorization = build_authorization_header(credential, sid, clock())
        authority = f"[{host}]:{port}" if ":" in host else f"{host}:{port}"
        target = f"{path}?user={quote(username, safe='')}"
        stream_id, headers = await asyncio.wait_for(protocol.send_connect(authority, target, authorization),
                                                    timeout)
    except asyncio.TimeoutError:
        protocol.close_connection(0, "timeout")
        raise TransportError(f"timed out connecting to {host}:{port}") from None
    except SessionError:
        protocol.close_connection(0, "setup failed")
        raise
    except Exception as exc:
        protocol.close_connection(0, "setup failed")
        raise ConnectionSetupError(str(exc) or type(exc).__name__) from exc
    fields = {}
    for k, v in headers:
        fields.setdefault(k, v)
    status = fields.get(b":status", b"").decode()
    if status == "200":
        limit = fields.get(MAX_CHANNELS_HEADER)
        conv = Conversation(protocol, "client", sid, username, stream_id,
                            max_channels=int(limit) if limit and limit.isdigit() else None)
        protocol.conversation = conv
        return conv
    protocol.close_connection(0, f"CONNECT answered {status}")
    if status == "401":
        raise AuthenticationError(parse_www_authenticate(fields.get(b"www-authenticate", b"").decode("latin-1")))
    if status == "404":
        raise PathNotFound(path)
    raise ConnectionSetupError(f"server answered CONNECT with status {status or '?'}")
