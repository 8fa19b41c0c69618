"""Server endpoint: path gate, authorization and conversation registry."""

from __future__ import annotations

import asyncio
import functools
import logging
import time
from typing import Optional
from urllib.parse import parse_qs, urlsplit

from aioquic.asyncio import serve
from aioquic.h3.events import DataReceived, HeadersReceived, H3Event
from aioquic.quic.events import StreamReset

from ..auth.exporter import ExporterUnavailable, derive_conversation_id
from ..auth.verify import AuthDecision, Authenticator
from .conversation import ChannelHandler, Conversation
from .errors import ChannelError
from .protocol import ConversationProtocol
from .transport import TransportOptions, quic_configuration, tune_socket

log = logging.getLogger(__name__)

PROTOCOL_TOKEN = b"ssh3"
MAX_CHANNELS_HEADER = b"ssh3-max-channels"


def www_authenticate(schemes) -> bytes:
    return ", ".join(f'{s} realm="ssh3"' for s in schemes).encode()


class ServerProtocol(ConversationProtocol):
    is_client = False

    def __init__(self, quic, stream_handler=None, *, server: "Server"):
        super().__init__(quic, stream_handler, options=server.options)
        self.server = server
        self._conversations: dict[int, Conversation] = {}

    def conversation_for(self, session_stream_id: int) -> Optional[Conversation]:
        return self._conversations.get(session_stream_id)

    def quic_event_received(self, event) -> None:
        if isinstance(event, StreamReset) and event.stream_id in self._conversations:
            self._conversations.pop(event.stream_id)._terminated("CONNECT stream reset")
        super().quic_event_received(event)

    def h3_event_received(self, event: H3Event) -> None:
        if isinstance(event, HeadersReceived):
            self._on_request(event)
        elif isinstance(event, DataReceived) and event.stream_ended:
            conv = self._conversations.pop(event.stream_id, None)
            if conv is not None:
                conv._terminated("CONNECT stream finished")
        else:
            super().h3_event_received(event)

    def _respond(self, stream_id: int, status: int, extra=(), end: bool = True) -> None:
        headers = [(b":status", str(status).encode()), (b"server", b"quicshell")] + list(extra)
        try:
            self.h3.send_headers(stream_id, headers, end_stream=end)
        except Exception as exc:
            log.debug("cannot respond on stream %d: %s", stream_id, exc)
        self.transmit()

    def _on_request(self, event: HeadersReceived) -> None:
        headers = {}
        for k, v in event.headers:
            headers.setdefault(k, v)
        target = urlsplit(headers.get(b":path", b"").decode("utf-8", "replace"))
        if (headers.get(b":method") != b"CONNECT" or headers.get(b":protocol") != PROTOCOL_TOKEN
                or target.path != self.server.url_path):
            self.server.path_rejections += 1
            self._respond(event.stream_id, 404)
            return
        if not (self.datagrams_enabled and self.extended_connect_enabled()):
            self._respond(event.stream_id, 400)
            return
        users = parse_qs(target.query).get("user", [])
        if len(users) != 1 or not users[0]:
            self._respond(event.stream_id, 400)
            return
        authorization = headers.get(b"authorization")
        asyncio.ensure_future(self._authenticate(
            event.stream_id, users[0], authorization.decode("latin-1") if authorization else None))

    async def _authenticate(self, stream_id: int, username: str, authorization: Optional[str]) -> None:
        server = self.server
        try:
            sid = derive_conversation_id(self.instrumentation.export)
        except ExporterUnavailable:
            self._respond(stream_id, 500)
            return
        loop = asyncio.get_running_loop()
        decision: AuthDecision = await loop.run_in_executor(
            None, server.authenticator.authenticate, authorization, username, sid)
        peer = self.peer_address[0] if self.peer_address else "?"
        log.info("auth user=%s peer=%s verdict=%s reason=%s", username, peer,
                 "accepted" if decision.accepted else "rejected",
                 decision.reason.value if decision.reason else "ok")
        server.decisions.append(decision)
        if self._terminated.done():
            return
        if not decision.accepted:
            self._respond(stream_id, 401, [(b"www-authenticate", www_authenticate(decision.schemes))])
            return
        conv = Conversation(self, "server", sid, decision.username, stream_id, server.max_channels,
                            handler=server.handler, event_hook=server.event_hook)
        self._conversations[stream_id] = conv
        server._add(conv)
        conv._emit("accepted")
        self._respond(stream_id, 200, [(MAX_CHANNELS_HEADER, str(server.max_channels).encode())], end=False)

    def _on_terminated(self, reason: str) -> None:
        super()._on_terminated(reason)
        for conv in list(self._conversations.values()):
            conv._terminated(reason)
        self._conversations.clear()


class Server:
    """An SSH3 server bound to one UDP socket.

    ``handler`` is awaited for every channel a client opens; without one,
    channels queue up for :meth:`Conversation.accept_channel`.
    """

    def __init__(self, *, url_path: str, authenticator: Authenticator, certfile: str, keyfile: str,
                 max_channels: int = 64, handler: Optional[ChannelHandler] = None,
                 options: Optional[TransportOptions] = None, event_hook=None):
        if not url_path.startswith("/"):
            raise ValueError("url_path must begin with '/'")
        if max_channels < 1:
            raise ValueError("max_channels must be at least 1")
        self.url_path = url_path
        self.authenticator = authenticator
        self.max_channels = max_channels
        self.handler = handler
        self.options = options or TransportOptions()
        self.event_hook = event_hook
        self.configuration = quic_configuration(is_client=False, options=self.options,
                                                certfile=certfile, keyfile=keyfile)
        self.path_rejections = 0
        self.decisions: list[AuthDecision] = []
        self.conversations: set[Conversation] = set()
        self._quic_server = None
        self.address = None
        self.started_at = None

    def _add(self, conv: Conversation) -> None:
        self.conversations.add(conv)
        conv._closed.add_done_callback(lambda _: self.conversations.discard(conv))

    async def start(self, host: str = "127.0.0.1", port: int = 0):
        self._quic_server = await serve(
            host, port, configuration=self.configuration,
            create_protocol=functools.partial(ServerProtocol, server=self))
        sock = self._quic_server._transport.get_extra_info("socket")
        tune_socket(sock, self.options.socket_buffer)
        self.address = sock.getsockname()[:2]
        self.started_at = time.time()
        return self.address

    def close(self) -> None:
        if self._quic_server is None:
            return
        for proto in list(self._quic_server._protocols.values()):
            if isinstance(proto, ServerProtocol):
                proto.close_connection(ChannelError.SHUTDOWN, "server shutting down")
        self._quic_server.close()
        self._quic_server = None

    async def __aenter__(self):
        if self._quic_server is None:
            await self.start()
        return self

    async def __aexit__(self, *exc):
        self.close()
