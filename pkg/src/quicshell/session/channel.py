"""Channels: ordered message pipes, one per bidirectional QUIC stream."""

from __future__ import annotations

import asyncio
import collections
import logging
from typing import TYPE_CHECKING, Optional

from .. import wire
from ..wire import ChannelPreamble, Message
from .errors import ChannelClosed, ChannelError, reason_for

if TYPE_CHECKING:
    from .conversation import Conversation

log = logging.getLogger(__name__)

QUEUE_LIMIT = 256
DATAGRAM_QUEUE_LIMIT = 1024
HIGH_WATER = 1 << 20
LOW_WATER = 1 << 19

OPEN, HALF_CLOSED, CLOSED = "open", "half-closed", "closed"


class Channel:
    """A typed channel within a conversation.

    Use :meth:`send_message` and :meth:`next_message`; the latter returns
    ``None`` once the peer has cleanly finished its side.
    """

    def __init__(self, conversation: "Conversation", stream_id: int, preamble: ChannelPreamble,
                 queue_limit: int = QUEUE_LIMIT, preamble_end: int = 0):
        self.conversation = conversation
        self.id = stream_id
        self.preamble = preamble
        self.type = preamble.channel_type
        self.queue_limit = queue_limit
        self._decoder = wire.FrameDecoder()
        self._queue: collections.deque = collections.deque()
        self._sizes: collections.deque = collections.deque()
        self._readable: Optional[asyncio.Future] = None
        self._peer_fin = False
        self._eof = False
        self._sent_fin = False
        self._error: Optional[ChannelClosed] = None
        self._drain_waiter: Optional[asyncio.Future] = None
        self._closed = asyncio.get_running_loop().create_future()
        self._preamble_end = preamble_end
        self._skipped_seen = 0
        self.messages_received = 0
        # direct-udp
        self._datagrams: collections.deque = collections.deque()
        self._datagram_waiter: Optional[asyncio.Future] = None
        self._held: list[bytes] = []

    def __repr__(self):
        return f"<Channel {self.type} id={self.id} {self.state}>"

    @property
    def datagram_id(self) -> Optional[int]:
        return self.preamble.datagram_id

    @property
    def state(self) -> str:
        if self._error is not None or (self._sent_fin and self._eof):
            return CLOSED
        if self._sent_fin or self._peer_fin:
            return HALF_CLOSED
        return OPEN

    @property
    def queued(self) -> int:
        return len(self._queue)

    # -- receive ---------------------------------------------------------------

    def _feed(self, data: bytes, fin: bool) -> None:
        if self._error is not None:
            return
        if data:
            self._decoder.feed(data)
        if fin:
            self._peer_fin = True
        self._pump()

    def _pump(self) -> None:
        while len(self._queue) < self.queue_limit:
            try:
                item = self._decoder.pop()
            except wire.WireError as exc:
                log.warning("channel %d: protocol error: %s", self.id, exc)
                self.abort(ChannelError.PROTOCOL)
                return
            if item is None:
                break
            msg, size = item
            self._queue.append(msg)
            self._sizes.append(size)
            if self.messages_received == 0:
                self.conversation._emit("channel-message", self)
            self.messages_received += 1
        skipped = self._decoder.skipped_bytes - self._skipped_seen
        if skipped:
            self._skipped_seen = self._decoder.skipped_bytes
            self.conversation._credit(self.id, skipped)
        if self._peer_fin and not self._queue and not self._eof:
            if self._decoder.buffered:
                log.warning("channel %d: stream ended inside a frame", self.id)
                self.abort(ChannelError.PROTOCOL)
                return
            self._eof = True
            self._maybe_finished()
        self._wake_reader()

    def _wake_reader(self) -> None:
        if self._readable is not None and not self._readable.done():
            self._readable.set_result(None)

    def _fail(self, error: ChannelClosed) -> None:
        """Peer reset or connection loss."""
        if self._error is None:
            self._error = error
        self._queue.clear()
        self._wake_reader()
        self._wake_writer()
        self._finish()

    def nowait(self) -> Optional[Message]:
        """A queued message, if any, without waiting."""
        if not self._queue:
            return None
        msg = self._queue.popleft()
        self.conversation._credit(self.id, self._sizes.popleft())
        self._pump()
        return msg

    async def next_message(self) -> Optional[Message]:
        while True:
            if self._queue:
                return self.nowait()
            if self._error is not None:
                raise self._error
            if self._eof:
                return None
            self._readable = asyncio.get_running_loop().create_future()
            await self._readable
            self._readable = None

    def __aiter__(self):
        return self

    async def __anext__(self) -> Message:
        msg = await self.next_message()
        if msg is None:
            raise StopAsyncIteration
        return msg

    # -- send ------------------------------------------------------------------------

    def write(self, message: Message) -> None:
        """Queue a message for sending without waiting for buffer space."""
        if self._error is not None:
            raise self._error
        if self._sent_fin:
            raise ChannelClosed("local side already closed")
        if isinstance(message, wire.Data) and len(message.payload) > wire.MAX_DATA_PAYLOAD:
            frames = b"".join(wire.encode_frame(m) for m in wire.split_data(message.kind, message.payload))
        else:
            frames = wire.encode_frame(message)
        self.conversation._send_stream(self.id, frames, False)

    async def drain(self) -> None:
        conv = self.conversation
        while self._error is None and conv._unacked(self.id) > HIGH_WATER:
            self._drain_waiter = asyncio.get_running_loop().create_future()
            conv._watch(self)
            await self._drain_waiter
        if self._error is not None:
            raise self._error

    async def send_message(self, message: Message) -> None:
        self.write(message)
        await self.drain()

    def _wake_writer(self) -> None:
        if self._drain_waiter is not None and not self._drain_waiter.done():
            self._drain_waiter.set_result(None)

    def _poll(self) -> bool:
        """Called after transmissions; returns True while still watching."""
        conv = self.conversation
        if self._held and conv._acked(self.id) >= self._preamble_end:
            held, self._held = self._held, []
            for payload in held:
                conv._send_datagram(self, payload)
        if self._drain_waiter is not None and not self._drain_waiter.done():
            if self._error is not None or conv._unacked(self.id) <= LOW_WATER:
                self._wake_writer()
        return bool(self._held) or (self._drain_waiter is not None and not self._drain_waiter.done())

    # -- close --------------------------------------------------------------------------

    def close(self) -> None:
        """Finish our sending side; the peer sees end-of-channel."""
        if self._sent_fin or self._error is not None:
            return
        self._sent_fin = True
        self.conversation._send_stream(self.id, b"", True)
        self._maybe_finished()

    def abort(self, code: int = ChannelError.CLOSED) -> None:
        """Reset both directions of the stream."""
        if self._error is not None:
            return
        self.conversation._reset_stream(self.id, int(code))
        self._fail(ChannelClosed(reason_for(code), int(code)))

    def _maybe_finished(self) -> None:
        if self._sent_fin and self._eof:
            self._finish()

    def _finish(self) -> None:
        if not self._closed.done():
            self._closed.set_result(None)
            self.conversation._channel_finished(self)
        if self._datagram_waiter is not None and not self._datagram_waiter.done():
            self._datagram_waiter.set_result(None)

    async def wait_closed(self) -> None:
        await asyncio.shield(self._closed)

    @property
    def error(self) -> Optional[ChannelClosed]:
        return self._error

    # -- datagrams (direct-udp) --------------------------------------------------------

    def send_datagram(self, payload: bytes) -> bool:
        """Send one UDP payload; False if it was dropped."""
        if self._error is not None:
            return False
        conv = self.conversation
        if not conv._datagram_fits(self, payload):
            conv.oversized_datagrams += 1
            return False
        if self._held or conv._acked(self.id) < self._preamble_end:
            if len(self._held) >= DATAGRAM_QUEUE_LIMIT:
                conv.datagrams_dropped += 1
                return False
            self._held.append(bytes(payload))
            conv._watch(self)
            return True
        return conv._send_datagram(self, payload)

    def _on_datagram(self, payload: bytes) -> None:
        if len(self._datagrams) >= DATAGRAM_QUEUE_LIMIT:
            self.conversation.datagrams_dropped += 1
            return
        self._datagrams.append(payload)
        if self._datagram_waiter is not None and not self._datagram_waiter.done():
            self._datagram_waiter.set_result(None)

    async def recv_datagram(self) -> Optional[bytes]:
        """Next UDP payload; None once the channel is closed."""
        while not self._datagrams:
            if self._error is not None or self._closed.done():
                return None
            self._datagram_waiter = asyncio.get_running_loop().create_future()
            await self._datagram_waiter
        return self._datagrams.popleft()
