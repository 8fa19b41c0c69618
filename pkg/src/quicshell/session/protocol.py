"""QUIC/HTTP-3 plumbing shared by the client and server endpoints.

Channel streams begin with the WebTransport-style signal ``0x41`` and the
id of the CONNECT stream that owns them. They are claimed here before the
HTTP/3 layer sees them; every other stream is handed to aioquic's
``H3Connection``, which also carries the CONNECT exchange and datagrams.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Optional

from aioquic.asyncio.protocol import QuicConnectionProtocol
from aioquic.h3.connection import H3Connection, Setting
from aioquic.h3.events import DatagramReceived, H3Event
from aioquic.quic.events import (
    ConnectionTerminated, ProtocolNegotiated, QuicEvent, StopSendingReceived, StreamDataReceived, StreamReset,
)

from .. import wire
from .channel import Channel
from .errors import ChannelClosed, ChannelError, reason_for
from .transport import Instrumentation, TransportOptions

log = logging.getLogger(__name__)

CHANNEL_SIGNAL = 0x41


def _client_bidi(stream_id: int) -> bool:
    return stream_id & 0x3 == 0


class ConversationProtocol(QuicConnectionProtocol):
    is_client = False

    def __init__(self, quic, stream_handler=None, *, options: Optional[TransportOptions] = None):
        super().__init__(quic, stream_handler)
        self.options = options or TransportOptions()
        self.quic = quic
        self.instrumentation = Instrumentation(quic, self.options)
        # Created once the peer's transport parameters are known: aioquic
        # holds back streams opened earlier until the handshake completes,
        # which would delay the server's SETTINGS by a round trip.
        self.h3: Optional[H3Connection] = None
        self._channels: dict[int, Channel] = {}
        self._watched: set[Channel] = set()
        self._undecided: dict[int, bytearray] = {}
        self._h3_streams: set[int] = set()
        self._retired: set[int] = set()
        self._transmit_scheduled = False
        self._terminated = asyncio.get_running_loop().create_future()
        self.peer_address = None

    # -- transmission --------------------------------------------------------------

    def schedule_transmit(self) -> None:
        if not self._transmit_scheduled:
            self._transmit_scheduled = True
            self._loop.call_soon(self._deferred_transmit)

    def _deferred_transmit(self) -> None:
        self._transmit_scheduled = False
        self.transmit()

    def transmit(self) -> None:
        super().transmit()
        if self._watched:
            for ch in list(self._watched):
                if not ch._poll():
                    self._watched.discard(ch)

    def datagram_received(self, data, addr) -> None:
        if self.peer_address is None:
            self.peer_address = addr
        super().datagram_received(data, addr)

    @property
    def local_address(self):
        return self._transport.get_extra_info("sockname") if self._transport is not None else None

    @property
    def datagrams_enabled(self) -> bool:
        settings = (self.h3 and self.h3.received_settings) or {}
        return (self.quic._remote_max_datagram_frame_size is not None
                and settings.get(Setting.H3_DATAGRAM) == 1)

    def extended_connect_enabled(self) -> bool:
        settings = (self.h3 and self.h3.received_settings) or {}
        return settings.get(Setting.ENABLE_CONNECT_PROTOCOL) == 1

    # -- channel bookkeeping ------------------------------------------------------------

    def _register_channel(self, ch: Channel) -> None:
        self._channels[ch.id] = ch
        self.instrumentation.manage(ch.id)

    def _unregister_channel(self, ch: Channel) -> None:
        if self._channels.pop(ch.id, None) is not None:
            self._retired.add(ch.id)
        self._watched.discard(ch)
        self.instrumentation.release(ch.id)

    def conversation_for(self, session_stream_id: int):
        raise NotImplementedError

    # -- events -----------------------------------------------------------------------------

    def quic_event_received(self, event: QuicEvent) -> None:
        if isinstance(event, ProtocolNegotiated) and self.h3 is None:
            self.h3 = H3Connection(self.quic, enable_webtransport=True)
        if isinstance(event, StreamDataReceived):
            ch = self._channels.get(event.stream_id)
            if ch is not None:
                ch._feed(event.data, event.end_stream)
                return
            if event.stream_id in self._retired:
                return
            if (not self.is_client and _client_bidi(event.stream_id)
                    and event.stream_id not in self._h3_streams):
                self._sniff(event)
                return
        elif isinstance(event, (StreamReset, StopSendingReceived)):
            ch = self._channels.get(event.stream_id)
            if ch is not None:
                if isinstance(event, StopSendingReceived):
                    ch.abort(event.error_code)
                else:
                    ch._fail(ChannelClosed(reason_for(event.error_code), event.error_code))
                return
            if event.stream_id in self._retired or event.stream_id in self._undecided:
                self._undecided.pop(event.stream_id, None)
                return
        elif isinstance(event, ConnectionTerminated):
            reason = event.reason_phrase or f"error 0x{event.error_code:x}"
            self._on_terminated(reason)
        if self.h3 is None:
            return
        for h3_event in self.h3.handle_event(event):
            self.h3_event_received(h3_event)

    def _sniff(self, event: StreamDataReceived) -> None:
        sid = event.stream_id
        buf = self._undecided.setdefault(sid, bytearray())
        buf += event.data
        try:
            signal, n1 = wire.decode_varint(buf)
        except wire.NeedMoreData:
            if event.end_stream:
                self._undecided.pop(sid, None)
            return
        if signal != CHANNEL_SIGNAL:
            del self._undecided[sid]
            self._h3_streams.add(sid)
            replay = StreamDataReceived(data=bytes(buf), end_stream=event.end_stream, stream_id=sid)
            for h3_event in self.h3.handle_event(replay):
                self.h3_event_received(h3_event)
            return
        try:
            session_id, n2 = wire.decode_varint(buf, n1)
            preamble, n3 = wire.decode_preamble(buf, n1 + n2)
        except wire.NeedMoreData:
            if event.end_stream:
                self._undecided.pop(sid, None)
                self._reject_stream(sid, ChannelError.PROTOCOL)
            return
        except wire.UnknownChannelType as exc:
            log.info("stream %d: unknown channel type %r", sid, exc.channel_type)
            self._reject_stream(sid, ChannelError.UNKNOWN_CHANNEL_TYPE)
            return
        except wire.WireError as exc:
            log.info("stream %d: bad channel preamble: %s", sid, exc)
            self._reject_stream(sid, ChannelError.PROTOCOL)
            return
        del self._undecided[sid]
        conv = self.conversation_for(session_id)
        if conv is None or conv.closed:
            self._reject_stream(sid, ChannelError.UNKNOWN_CONVERSATION)
            return
        conv._accept_stream(sid, preamble, bytes(buf[n1 + n2 + n3:]), event.end_stream)

    def _reject_stream(self, stream_id: int, code: int) -> None:
        self._undecided.pop(stream_id, None)
        self._retired.add(stream_id)
        for op in (self.quic.reset_stream, self.quic.stop_stream):
            try:
                op(stream_id, int(code))
            except Exception:
                pass
        self.schedule_transmit()

    def h3_event_received(self, event: H3Event) -> None:
        if isinstance(event, DatagramReceived):
            conv = self.conversation_for(event.stream_id)
            if conv is not None:
                conv.route_datagram(event.data)

    # -- lifecycle ------------------------------------------------------------------------------

    def _on_terminated(self, reason: str) -> None:
        if not self._terminated.done():
            self._terminated.set_result(reason)
        for ch in list(self._channels.values()):
            ch._fail(ChannelClosed(f"connection closed: {reason}"))

    def close_connection(self, error_code: int = 0, reason: str = "") -> None:
        if self._terminated.done():
            return
        self.quic.close(error_code=error_code, reason_phrase=reason)
        self.transmit()
        self._on_terminated(reason or "closed locally")

    async def wait_terminated(self) -> str:
        return await asyncio.shield(self._terminated)

    def connection_lost(self, exc) -> None:
        super().connection_lost(exc)
        self._on_terminated(f"socket closed: {exc}" if exc else "socket closed")
