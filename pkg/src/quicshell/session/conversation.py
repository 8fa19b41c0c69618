"""An authenticated SSH3 conversation and its channel table."""

from __future__ import annotations

import asyncio
import logging
import time
from typing import TYPE_CHECKING, Awaitable, Callable, Optional

from .. import wire
from ..auth.exporter import ConversationId
from ..wire import ChannelPreamble
from .channel import Channel
from .errors import ChannelClosed, ChannelError, ChannelRejected, TransportError

if TYPE_CHECKING:
    from .protocol import ConversationProtocol

log = logging.getLogger(__name__)

CHANNEL_SIGNAL = 0x41
MAX_PENDING_DATAGRAMS = 2048

ChannelHandler = Callable[["Conversation", Channel], Awaitable[None]]


class Conversation:
    def __init__(self, protocol: "ConversationProtocol", role: str, conversation_id: ConversationId,
                 username: str, session_stream_id: int, max_channels: Optional[int] = None,
                 handler: Optional[ChannelHandler] = None, event_hook=None):
        self.protocol = protocol
        self.role = role
        self.conversation_id = conversation_id
        self.username = username
        self.session_stream_id = session_stream_id
        self.max_channels = max_channels
        self.channels: dict[int, Channel] = {}
        self.routes: dict[int, Channel] = {}
        self.handler = handler
        self.event_hook = event_hook
        self.unknown_datagrams = 0
        self.malformed_datagrams = 0
        self.oversized_datagrams = 0
        self.datagrams_dropped = 0
        self._next_datagram_id = 0
        self._incoming: asyncio.Queue = asyncio.Queue()
        self._tasks: set[asyncio.Task] = set()
        self._closed = asyncio.get_running_loop().create_future()
        self.close_reason: Optional[str] = None
        self.first_message_at: Optional[float] = None

    def __repr__(self):
        return f"<Conversation {self.role} user={self.username} channels={len(self.channels)}>"

    @property
    def closed(self) -> bool:
        return self._closed.done()

    @property
    def peer(self):
        return self.protocol.peer_address

    # -- channels -------------------------------------------------------------------

    def open_channel(self, preamble: ChannelPreamble) -> Channel:
        """Open a channel and return it at once; the preamble rides the first flight."""
        if self.closed:
            raise TransportError(f"conversation closed: {self.close_reason}")
        if self.max_channels is not None and len(self.channels) >= self.max_channels:
            raise ChannelRejected(f"channel limit of {self.max_channels} reached")
        if preamble.channel_type == wire.DIRECT_UDP:
            if not self.protocol.datagrams_enabled:
                raise ChannelRejected("QUIC datagrams were not negotiated")
            if preamble.datagram_id in self.routes:
                raise ChannelRejected(f"datagram id {preamble.datagram_id} already in use")
        header = (wire.encode_varint(CHANNEL_SIGNAL) + wire.encode_varint(self.session_stream_id)
                  + wire.encode_preamble(preamble))
        stream_id = self.protocol.quic.get_next_available_stream_id()
        ch = Channel(self, stream_id, preamble, preamble_end=len(header))
        self._register(ch)
        self._send_stream(stream_id, header, False)
        return ch

    def open_session(self) -> Channel:
        return self.open_channel(ChannelPreamble.session())

    def open_tcp(self, host: str, port: int) -> Channel:
        return self.open_channel(ChannelPreamble.tcp(host, port))

    def open_udp(self, host: str, port: int) -> Channel:
        return self.open_channel(ChannelPreamble.udp(host, port, self.allocate_datagram_id()))

    def allocate_datagram_id(self) -> int:
        while self._next_datagram_id in self.routes:
            self._next_datagram_id += 1
        value = self._next_datagram_id
        self._next_datagram_id += 1
        return value

    def _register(self, ch: Channel) -> None:
        self.channels[ch.id] = ch
        if ch.datagram_id is not None:
            self.routes[ch.datagram_id] = ch
        self.protocol._register_channel(ch)

    def _accept_stream(self, stream_id: int, preamble: ChannelPreamble, rest: bytes, fin: bool) -> None:
        """Server side: a client opened a channel."""
        if self.max_channels is not None and len(self.channels) >= self.max_channels:
            log.info("conversation %s: channel limit reached, rejecting stream %d", self.username, stream_id)
            self._reset_stream(stream_id, ChannelError.CHANNEL_LIMIT)
            return
        if preamble.channel_type == wire.DIRECT_UDP and preamble.datagram_id in self.routes:
            self._reset_stream(stream_id, ChannelError.PROTOCOL)
            return
        ch = Channel(self, stream_id, preamble)
        self._register(ch)
        self._emit("channel-opened", ch)
        if self.handler is not None:
            self._spawn(self._run_handler(ch))
        else:
            self._incoming.put_nowait(ch)
        ch._feed(rest, fin)

    async def _run_handler(self, ch: Channel) -> None:
        try:
            await self.handler(self, ch)
        except ChannelClosed:
            pass
        except Exception:
            log.exception("channel %d handler failed", ch.id)
            ch.abort(ChannelError.PROTOCOL)

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def accept_channel(self) -> Channel:
        """Next channel opened by the peer (when no handler is installed)."""
        getter = asyncio.ensure_future(self._incoming.get())
        done, _ = await asyncio.wait({getter, self._closed}, return_when=asyncio.FIRST_COMPLETED)
        if getter in done:
            return getter.result()
        getter.cancel()
        raise TransportError(f"conversation closed: {self.close_reason}")

    def _channel_finished(self, ch: Channel) -> None:
        self.channels.pop(ch.id, None)
        if ch.datagram_id is not None and self.routes.get(ch.datagram_id) is ch:
            del self.routes[ch.datagram_id]
        self.protocol._unregister_channel(ch)

    # -- datagrams -----------------------------------------------------------------------

    def route_datagram(self, data: bytes) -> bool:
        """Deliver an HTTP datagram payload to its direct-udp channel."""
        try:
            frame = wire.decode_udp_frame(data)
        except wire.WireError:
            self.malformed_datagrams += 1
            return False
        ch = self.routes.get(frame.datagram_id)
        if ch is None:
            self.unknown_datagrams += 1
            return False
        ch._on_datagram(frame.payload)
        return True

    @property
    def dropped(self) -> int:
        return self.unknown_datagrams + self.malformed_datagrams + self.oversized_datagrams + self.datagrams_dropped

    def _datagram_fits(self, ch: Channel, payload: bytes) -> bool:
        overhead = wire.udp_header_size(ch.datagram_id) + len(wire.encode_varint(self.session_stream_id // 4))
        return len(payload) + overhead <= self.protocol.options.datagram_capacity

    def _send_datagram(self, ch: Channel, payload: bytes) -> bool:
        if self.protocol.instrumentation.datagrams_pending() >= MAX_PENDING_DATAGRAMS:
            self.datagrams_dropped += 1
            return False
        frame = wire.encode_udp_frame(wire.UdpFrame(ch.datagram_id, payload))
        self.protocol.h3.send_datagram(self.session_stream_id, frame)
        self.protocol.schedule_transmit()
        return True

    # -- plumbing used by channels -----------------------------------------------------------

    def _send_stream(self, stream_id: int, data: bytes, fin: bool) -> None:
        if self.closed:
            raise ChannelClosed(f"conversation closed: {self.close_reason}")
        try:
            self.protocol.quic.send_stream_data(stream_id, data, end_stream=fin)
        except Exception as exc:  # aioquic raises plain exceptions for finished/reset streams
            raise ChannelClosed(f"stream unusable: {exc}") from None
        self.protocol.schedule_transmit()

    def _reset_stream(self, stream_id: int, code: int) -> None:
        quic = self.protocol.quic
        for op in (quic.reset_stream, quic.stop_stream):
            try:
                op(stream_id, int(code))
            except Exception:
                pass
        self.protocol.schedule_transmit()

    def _credit(self, stream_id: int, nbytes: int) -> None:
        if self.protocol.instrumentation.consumed(stream_id, nbytes):
            self.protocol.schedule_transmit()

    def _unacked(self, stream_id: int) -> int:
        return self.protocol.instrumentation.unacked(stream_id)

    def _acked(self, stream_id: int) -> int:
        return self.protocol.instrumentation.acked_offset(stream_id)

    def _watch(self, ch: Channel) -> None:
        self.protocol._watched.add(ch)

    def _emit(self, name: str, ch: Optional[Channel] = None) -> None:
        if name == "channel-message" and self.first_message_at is None:
            self.first_message_at = time.monotonic()
        if self.event_hook is not None:
            try:
                self.event_hook(name, self, ch)
            except Exception:
                log.exception("event hook failed")

    # -- lifecycle ------------------------------------------------------------------------------

    def _terminated(self, reason: str) -> None:
        if self._closed.done():
            return
        self.close_reason = reason
        err = ChannelClosed(f"connection closed: {reason}")
        for ch in list(self.channels.values()):
            ch._fail(err)
        self._closed.set_result(None)
        self._emit("closed")

    def close(self, error_code: int = 0, reason: str = "") -> None:
        self.protocol.close_connection(error_code, reason)

    async def wait_closed(self) -> None:
        await asyncio.shield(self._closed)

    async def aclose(self) -> None:
        self.close()
        await self.protocol.wait_terminated()

    async def __aenter__(self):
        return self

    async def __aexit__(self, *exc):
        await self.aclose()
