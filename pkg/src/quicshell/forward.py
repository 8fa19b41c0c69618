"""Local TCP and UDP port forwarding through a conversation."""

from __future__ import annotations

import asyncio
import ipaddress
import logging
import re
import socket
import time
from dataclasses import dataclass
from typing import Optional

from . import wire
from .session.channel import Channel
from .session.conversation import Conversation
from .session.errors import ChannelClosed, ChannelError, SessionError
from .session.transport import tune_socket

log = logging.getLogger(__name__)

CONNECT_TIMEOUT = 10.0
UDP_IDLE_TIMEOUT = 60.0
READ_SIZE = 65536
UDP_SOCKET_BUFFER = 4 << 20
FORWARD_KIND = wire.DataKind.STDOUT


class ForwardError(Exception):
    def __init__(self, message: str, code: ChannelError):
        super().__init__(message)
        self.code = code

    @property
    def reason(self) -> str:
        return self.code.reason


# -- forwarding specs ---------------------------------------------------------

_ENDPOINT = re.compile(r"^(?:\[(?P<v6>[^\]]+)\]|(?P<host>[^:/\[\]]+)):(?P<port>\d+)$")


def _parse_endpoint(text: str) -> tuple[str, int]:
    m = _ENDPOINT.match(text)
    if not m:
        raise ValueError(f"expected host:port, got {text!r}")
    host = m.group("v6") or m.group("host")
    if m.group("v6"):
        ipaddress.IPv6Address(m.group("v6"))
    return host, int(m.group("port"))


def _format_endpoint(host: str, port: int) -> str:
    return f"[{host}]:{port}" if ":" in host else f"{host}:{port}"


@dataclass(frozen=True)
class ForwardingSpec:
    """``tcp/<bind>:<port>/<host>:<port>`` or the ``udp/`` equivalent."""

    protocol: str
    bind_host: str
    bind_port: int
    target_host: str
    target_port: int

    def __post_init__(self):
        if self.protocol not in ("tcp", "udp"):
            raise ValueError(f"protocol must be tcp or udp, not {self.protocol!r}")
        for port in (self.bind_port, self.target_port):
            if not 1 <= port <= 65535:
                raise ValueError(f"port {port} outside 1..65535")
        if not self.bind_host or not self.target_host:
            raise ValueError("empty host")

    @classmethod
    def parse(cls, text: str) -> "ForwardingSpec":
        proto, sep, rest = text.partition("/")
        if not sep:
            raise ValueError(f"forwarding spec needs a protocol prefix: {text!r}")
        local, sep, remote = rest.partition("/")
        if not sep:
            raise ValueError(f"forwarding spec needs <bind>:<port>/<host>:<port>: {text!r}")
        return cls(proto, *_parse_endpoint(local), *_parse_endpoint(remote))

    def __str__(self) -> str:
        return (f"{self.protocol}/{_format_endpoint(self.bind_host, self.bind_port)}"
                f"/{_format_endpoint(self.target_host, self.target_port)}")


# -- TCP --------------------------------------------------------------------------

async def server_open_tcp(host: str, port: int, timeout: float = CONNECT_TIMEOUT):
    """Connect to the forwarding target; failures carry a channel error code."""
    loop = asyncio.get_running_loop()
    try:
        infos = await loop.getaddrinfo(host, port, type=socket.SOCK_STREAM)
    except socket.gaierror as exc:
        raise ForwardError(f"cannot resolve {host}: {exc}", ChannelError.DNS) from None
    last: Optional[ForwardError] = None
    deadline = loop.time() + timeout
    for family, type_, proto, _, addr in infos:
        remaining = deadline - loop.time()
        if remaining <= 0:
            break
        try:
            return await asyncio.wait_for(asyncio.open_connection(addr[0], addr[1]), remaining)
        except asyncio.TimeoutError:
            last = ForwardError(f"connection to {host}:{port} timed out", ChannelError.TIMEOUT)
        except ConnectionRefusedError:
            last = ForwardError(f"connection to {host}:{port} refused", ChannelError.REFUSED)
        except OSError as exc:
            last = ForwardError(f"cannot reach {host}:{port}: {exc}", ChannelError.UNREACHABLE)
    raise last or ForwardError(f"connection to {host}:{port} timed out", ChannelError.TIMEOUT)


async def relay_tcp(ch: Channel, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
    """Copy bytes between a TCP connection and a channel until both sides finish."""

    async def outbound():
        while True:
            data = await reader.read(READ_SIZE)
            if not data:
                ch.close()
                return
            await ch.send_message(wire.Data(FORWARD_KIND, data))

    async def inbound():
        while True:
            msg = await ch.next_message()
            if msg is None:
                if writer.can_write_eof():
                    writer.write_eof()
                return
            if not isinstance(msg, wire.Data):
                raise ChannelClosed(f"unexpected {type(msg).__name__} on a forwarding channel",
                                    ChannelError.PROTOCOL)
            writer.write(msg.payload)
            await writer.drain()

    tasks = [asyncio.ensure_future(outbound()), asyncio.ensure_future(inbound())]
    try:
        done, pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_EXCEPTION)
        for t in done:
            exc = t.exception()
            if exc is None:
                continue
            if isinstance(exc, ChannelClosed):
                if exc.code == ChannelError.PROTOCOL:
                    ch.abort(ChannelError.PROTOCOL)
                writer.transport.abort()
            elif isinstance(exc, (ConnectionError, OSError)):
                ch.abort(ChannelError.CLOSED)
            else:
                raise exc
        for t in pending:
            t.cancel()
    finally:
        for t in tasks:
            t.cancel()
            # A side may fail while we are being cancelled; nobody else will look.
            t.add_done_callback(lambda f: f.cancelled() or f.exception())
        writer.close()


async def serve_tcp_channel(conv: Conversation, ch: Channel, timeout: float = CONNECT_TIMEOUT) -> None:
    """Server side of a direct-tcp channel."""
    target = ch.preamble
    try:
        reader, writer = await server_open_tcp(target.target_host, target.target_port, timeout)
    except ForwardError as exc:
        log.info("direct-tcp to %s:%d failed: %s", target.target_host, target.target_port, exc)
        ch.abort(exc.code)
        return
    await relay_tcp(ch, reader, writer)


class TcpForwarder:
    """Listens locally and opens one direct-tcp channel per accepted connection."""

    def __init__(self, conv: Conversation, spec: ForwardingSpec):
        if spec.protocol != "tcp":
            raise ValueError("TcpForwarder needs a tcp spec")
        self.conv = conv
        self.spec = spec
        self.server: Optional[asyncio.AbstractServer] = None
        self.connections = 0
        self.rejected = 0
        self._relays: set[asyncio.Task] = set()

    @property
    def address(self):
        return self.server.sockets[0].getsockname()[:2]

    async def start(self) -> "TcpForwarder":
        self.server = await asyncio.start_server(self._on_client, self.spec.bind_host, self.spec.bind_port)
        return self

    async def _on_client(self, reader, writer) -> None:
        self.connections += 1
        task = asyncio.current_task()
        self._relays.add(task)
        try:
            try:
                ch = self.conv.open_tcp(self.spec.target_host, self.spec.target_port)
            except SessionError as exc:
                log.info("forward %s: %s", self.spec, exc)
                self.rejected += 1
                writer.close()
                return
            await relay_tcp(ch, reader, writer)
            if ch.error is not None and ch.error.code not in (None, ChannelError.CLOSED):
                self.rejected += 1
                log.info("forward %s: channel closed: %s", self.spec, ch.error)
        finally:
            self._relays.discard(task)

    def close(self) -> None:
        if self.server is not None:
            self.server.close()
        for t in list(self._relays):
            t.cancel()

    async def wait_closed(self) -> None:
        if self.server is not None:
            await self.server.wait_closed()


async def client_forward_tcp(conv: Conversation, spec: ForwardingSpec) -> TcpForwarder:
    return await TcpForwarder(conv, spec).start()


# -- UDP -----------------------------------------------------------------------------

class _Datagrams(asyncio.DatagramProtocol):
    def __init__(self, on_datagram):
        self.on_datagram = on_datagram
        self.transport = None

    def connection_made(self, transport):
        self.transport = transport

    def datagram_received(self, data, addr):
        self.on_datagram(data, addr)

    def error_received(self, exc):
        log.debug("udp socket error: %s", exc)


async def serve_udp_channel(conv: Conversation, ch: Channel) -> None:
    """Server side of a direct-udp channel: one connected UDP socket to the target."""
    target = ch.preamble
    loop = asyncio.get_running_loop()
    try:
        infos = await loop.getaddrinfo(target.target_host, target.target_port, type=socket.SOCK_DGRAM)
    except socket.gaierror:
        ch.abort(ChannelError.DNS)
        return
    family, _, _, _, addr = infos[0]
    try:
        transport, _ = await loop.create_datagram_endpoint(
            lambda: _Datagrams(lambda data, _addr: ch.send_datagram(data)), remote_addr=addr[:2], family=family)
    except OSError:
        ch.abort(ChannelError.UNREACHABLE)
        return
    tune_socket(transport.get_extra_info("socket"), UDP_SOCKET_BUFFER)

    async def inbound():
        while True:
            payload = await ch.recv_datagram()
            if payload is None:
                return
            transport.sendto(payload)

    relay = asyncio.ensure_future(inbound())
    try:
        while await ch.next_message() is not None:
            pass
        ch.close()
    except ChannelClosed:
        pass
    finally:
        relay.cancel()
        transport.close()


@dataclass
class _Peer:
    channel: Channel
    last_active: float
    task: asyncio.Task


class UdpForwarder:
    """Local UDP socket whose peers each get their own direct-udp channel.

    Payloads too large for one datagram are dropped and counted in
    ``oversized``, just as an undersized link would drop them.
    """

    def __init__(self, conv: Conversation, spec: ForwardingSpec, idle_timeout: float = UDP_IDLE_TIMEOUT,
                 clock=time.monotonic):
        if spec.protocol != "udp":
            raise ValueError("UdpForwarder needs a udp spec")
        self.conv = conv
        self.spec = spec
        self.idle_timeout = idle_timeout
        self.clock = clock
        self.peers: dict = {}
        self.oversized = 0
        self.dropped = 0
        self.forwarded = 0
        self.returned = 0
        self.transport = None
        self._sweeper: Optional[asyncio.Task] = None

    @property
    def address(self):
        return self.transport.get_extra_info("sockname")[:2]

    async def start(self) -> "UdpForwarder":
        if not self.conv.protocol.datagrams_enabled:
            raise SessionError("UDP forwarding needs QUIC datagrams, which the server did not negotiate")
        loop = asyncio.get_running_loop()
        self.transport, _ = await loop.create_datagram_endpoint(
            lambda: _Datagrams(self._on_local), local_addr=(self.spec.bind_host, self.spec.bind_port))
        tune_socket(self.transport.get_extra_info("socket"), UDP_SOCKET_BUFFER)
        self._sweeper = asyncio.ensure_future(self._sweep())
        return self

    def _peer(self, addr) -> Optional[_Peer]:
        peer = self.peers.get(addr)
        if peer is not None and peer.channel.error is None:
            return peer
        if peer is not None:
            self._evict(addr)
        try:
            ch = self.conv.open_udp(self.spec.target_host, self.spec.target_port)
        except SessionError as exc:
            log.info("forward %s: %s", self.spec, exc)
            return None
        peer = _Peer(ch, self.clock(), asyncio.ensure_future(self._return_path(addr, ch)))
        self.peers[addr] = peer
        return peer

    def _on_local(self, data: bytes, addr) -> None:
        peer = self._peer(addr)
        if peer is None:
            self.dropped += 1
            return
        peer.last_active = self.clock()
        if not self.conv._datagram_fits(peer.channel, data):
            self.oversized += 1
            self.conv.oversized_datagrams += 1
            return
        if peer.channel.send_datagram(data):
            self.forwarded += 1
        else:
            self.dropped += 1

    async def _return_path(self, addr, ch: Channel) -> None:
        while True:
            payload = await ch.recv_datagram()
            if payload is None:
                return
            peer = self.peers.get(addr)
            if peer is not None:
                peer.last_active = self.clock()
            self.returned += 1
            self.transport.sendto(payload, addr)

    def _evict(self, addr) -> None:
        peer = self.peers.pop(addr, None)
        if peer is None:
            return
        peer.task.cancel()
        if peer.channel.error is None:
            try:
                peer.channel.close()
            except ChannelClosed:
                pass

    def sweep(self) -> int:
        """Evict idle peers now; returns how many were removed."""
        cutoff = self.clock() - self.idle_timeout
        stale = [addr for addr, p in self.peers.items() if p.last_active < cutoff or p.channel.error is not None]
        for addr in stale:
            self._evict(addr)
        return len(stale)

    async def _sweep(self) -> None:
        while True:
            await asyncio.sleep(max(self.idle_timeout / 4, 0.05))
            self.sweep()

    def close(self) -> None:
        if self._sweeper is not None:
            self._sweeper.cancel()
        for addr in list(self.peers):
            self._evict(addr)
        if self.transport is not None:
            self.transport.close()


async def client_forward_udp(conv: Conversation, spec: ForwardingSpec, idle_timeout: float = UDP_IDLE_TIMEOUT
                             ) -> UdpForwarder:
    return await UdpForwarder(conv, spec, idle_timeout).start()


async def client_forward(conv: Conversation, spec: ForwardingSpec):
    if spec.protocol == "tcp":
        return await client_forward_tcp(conv, spec)
    return await client_forward_udp(conv, spec)
