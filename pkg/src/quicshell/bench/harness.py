"""Measurement scenarios run against an in-process server."""

from __future__ import annotations

import asyncio
import contextlib
import os
import shutil
import socket
import struct
import tempfile
import time
from pathlib import Path
from typing import Optional

from cryptography.hazmat.primitives.asymmetric import ed25519

from .. import wire
from ..auth import Authenticator, IdentityStore, PrivateKey, pubkey_text
from ..auth.store import parse_pubkey_line
from ..forward import UDP_SOCKET_BUFFER, ForwardingSpec, client_forward
from ..service import channel_dispatcher
from ..session import Server, SessionError, TransportOptions, Trust, client_open_conversation
from ..session.transport import tune_socket
from ..tlsutil import generate_self_signed
from .proxy import LatencyProxy, ProxyError, count_round_trips
from .report import RunReport

USER = "bench"
URL_PATH = "/bench"
SESSION_TIMEOUT = 30.0
ECHO_TIMEOUT = 5.0

# Commands whose outputs match the sizes of the reference workloads: a
# trivial one, a 582-byte one and a ~131 kB one.
COMMANDS = {
    "trivial": ("true", 0),
    "small": ("yes 0123456789abcdef | head -c 582", 582),
    "large": ("yes 0123456789abcdef | head -c 131072", 131072),
}

UDP_PAYLOAD = 1200
UDP_RATE_MBPS = 60.0


class BenchError(RuntimeError):
    """A run failed; no partial statistics are reported."""


def _validate_n(n) -> None:
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")


class LoopbackRig:
    """Server, credentials and an optional latency proxy in front of it."""

    def __init__(self, rtt_ms: Optional[float] = None, options: Optional[TransportOptions] = None):
        if rtt_ms is not None and rtt_ms < 0:
            raise ValueError("rtt must be >= 0")
        self.rtt_ms = rtt_ms
        self.options = options or TransportOptions()
        self.key = ed25519.Ed25519PrivateKey.generate()
        self.first_messages: list[float] = []
        self.server: Optional[Server] = None
        self.proxy: Optional[LatencyProxy] = None
        self._dir = None
        self.fingerprint = None

    def _hook(self, name, conv, ch) -> None:
        if name == "channel-message" and conv.first_message_at is not None and not getattr(conv, "_bench_seen", False):
            conv._bench_seen = True
            self.first_messages.append(conv.first_message_at)

    async def __aenter__(self):
        self._dir = tempfile.mkdtemp(prefix="quicshell-bench-")
        cert, key = Path(self._dir, "cert.pem"), Path(self._dir, "key.pem")
        self.fingerprint = generate_self_signed(cert, key)
        store = IdentityStore({USER: [parse_pubkey_line(pubkey_text(self.key.public_key()))]})
        self.server = Server(url_path=URL_PATH, authenticator=Authenticator(store, ("pubkey",)),
                             certfile=str(cert), keyfile=str(key), handler=channel_dispatcher(),
                             options=self.options, event_hook=self._hook)
        await self.server.start()
        if self.rtt_ms is not None:
            self.proxy = LatencyProxy(self.server.address, self.rtt_ms / 2)
            self.proxy.start()
        return self

    async def __aexit__(self, *exc):
        if self.proxy is not None:
            self.proxy.close()
        if self.server is not None:
            self.server.close()
        shutil.rmtree(self._dir, ignore_errors=True)

    @property
    def address(self):
        return self.proxy.address if self.proxy is not None else self.server.address

    async def connect(self, timeout: float = 10.0):
        host, port = self.address
        return await client_open_conversation(
            host, port, URL_PATH, USER, PrivateKey(USER, self.key), trust=Trust(pin=self.fingerprint),
            options=self.options, server_name="localhost", timeout=timeout)


async def _collect_output(ch):
    out = bytearray()
    status = None
    async for msg in ch:
        if isinstance(msg, wire.Data):
            out.extend(msg.payload)
        elif isinstance(msg, wire.ExitStatus):
            status = msg.code
        elif isinstance(msg, wire.ExitSignal):
            raise BenchError(f"remote command killed by SIG{msg.signal_name}")
    if ch.error is not None:
        raise BenchError(f"channel failed: {ch.error}")
    return bytes(out), status


async def _one_session(rig: LoopbackRig, command: str, expected_len: int) -> tuple[float, int]:
    start = time.monotonic()
    conv = await rig.connect()
    port = conv.protocol.local_address[1]
    try:
        ch = conv.open_session()
        ch.write(wire.ExecRequest(command))
        out, status = await _collect_output(ch)
    finally:
        await conv.aclose()
    elapsed = (time.monotonic() - start) * 1000
    if status != 0 or len(out) != expected_len:
        raise BenchError(f"{command!r} exited {status} with {len(out)} bytes, expected 0 and {expected_len}")
    return elapsed, port


async def measure_session_completion(command: str, n: int, rtt_ms: float) -> RunReport:
    """Time ``n`` cold sessions that each run one command over a fresh conversation.

    ``command`` is a key of :data:`COMMANDS` or a shell command expected to
    print nothing. Each sample spans connect to close; the round-trip
    count comes from the proxy's packet log.
    """
    _validate_n(n)
    cmd, expected = COMMANDS.get(command, (command, 0))
    report = RunReport(f"session-{command if command in COMMANDS else 'custom'}-rtt{rtt_ms:g}")
    async with LoopbackRig(rtt_ms) as rig:
        for i in range(n):
            rig.proxy.clear()
            marks = len(rig.first_messages)
            try:
                elapsed, port = await asyncio.wait_for(_one_session(rig, cmd, expected), SESSION_TIMEOUT)
            except (SessionError, OSError, asyncio.TimeoutError) as exc:
                raise BenchError(f"session {i} failed: {exc or type(exc).__name__}") from exc
            if len(rig.first_messages) == marks:
                raise BenchError(f"session {i}: server saw no channel message")
            report.samples.append(elapsed)
            events = [e for e in rig.proxy.events() if e.client_port == port]
            report.rtt_counts.append(count_round_trips(events, rig.first_messages[-1]))
    return report


async def measure_echo_latency(n: int, rtt_ms: float) -> RunReport:
    """Keystroke-to-echo time against a remote ``cat`` on a raw pty."""
    _validate_n(n)
    report = RunReport(f"echo-rtt{rtt_ms:g}")
    async with LoopbackRig(rtt_ms) as rig:
        conv = await rig.connect()
        try:
            ch = conv.open_session()
            ch.write(wire.PtyRequest("xterm", 80, 24))
            ch.write(wire.ExecRequest("stty raw -echo && printf READY && exec cat"))
            pending = bytearray()

            async def read_until(predicate):
                while not predicate(pending):
                    msg = await asyncio.wait_for(ch.next_message(), ECHO_TIMEOUT)
                    if msg is None or not isinstance(msg, wire.Data):
                        raise BenchError(f"echo session ended early: {msg!r}")
                    pending.extend(msg.payload)

            try:
                await read_until(lambda b: b"READY" in b)
                del pending[:]
                for i in range(n):
                    key = bytes([0x61 + i % 26])
                    t0 = time.monotonic()
                    ch.write(wire.Data(wire.DataKind.STDIN, key))
                    await read_until(len)
                    report.samples.append((time.monotonic() - t0) * 1000)
                    if bytes(pending) != key:
                        raise BenchError(f"keystroke {i}: sent {key!r}, echoed {bytes(pending)!r}")
                    del pending[:]
            except asyncio.TimeoutError:
                raise BenchError(f"no echo within {ECHO_TIMEOUT:g} s") from None
            except SessionError as exc:
                raise BenchError(f"echo session failed: {exc}") from exc
        finally:
            await conv.aclose()
    return report


# -- forwarding throughput -------------------------------------------------------------

_PATTERN_LEN = 65521  # prime, so misplaced chunks never line up with the pattern


def _pattern() -> bytes:
    return os.urandom(_PATTERN_LEN) * 2


class _StreamCheck:
    """Verifies a byte stream against the repeating pattern."""

    def __init__(self, pattern: bytes, corrupt_at: Optional[int] = None):
        self.pattern = pattern
        self.offset = 0
        self.corrupt_at = corrupt_at

    def feed(self, data: bytes) -> None:
        if self.corrupt_at is not None and self.offset <= self.corrupt_at < self.offset + len(data):
            data = bytearray(data)
            data[self.corrupt_at - self.offset] ^= 0xFF
        view = memoryview(data)
        while view:
            start = self.offset % _PATTERN_LEN
            take = min(len(view), _PATTERN_LEN)
            if view[:take] != self.pattern[start:start + take]:
                raise BenchError(f"payload corrupted near byte {self.offset}")
            self.offset += take
            view = view[take:]


async def _tcp_goodput(conv, duration: float, corrupt: bool) -> tuple[float, dict]:
    pattern = _pattern()
    check = _StreamCheck(pattern, corrupt_at=100_000 if corrupt else None)
    done = asyncio.get_running_loop().create_future()
    times = []

    async def sink(reader, writer):
        try:
            while True:
                data = await reader.read(1 << 18)
                if not data:
                    break
                if not times:
                    times.append(time.monotonic())
                check.feed(data)
            times.append(time.monotonic())
            done.set_result(None)
        except BenchError as exc:
            done.set_exception(exc)
        finally:
            writer.close()

    target = await asyncio.start_server(sink, "127.0.0.1", 0)
    tport = target.sockets[0].getsockname()[1]
    fwd = await client_forward(conv, ForwardingSpec("tcp", "127.0.0.1", _free_port("tcp"), "127.0.0.1", tport))
    try:
        reader, writer = await asyncio.open_connection(*fwd.address)
        sent = 0
        deadline = time.monotonic() + duration
        chunk = 1 << 16
        try:
            while time.monotonic() < deadline and not done.done():
                start = sent % _PATTERN_LEN
                writer.write(pattern[start:start + chunk])
                sent += chunk
                await writer.drain()
            writer.write_eof()
        except ConnectionError as exc:
            if not done.done():
                raise BenchError(f"tunnel connection lost: {exc}") from exc
        await asyncio.wait_for(done, 60)
        writer.close()
        if check.offset != sent:
            raise BenchError(f"sink received {check.offset} of {sent} bytes")
        elapsed = times[-1] - times[0]
        return sent * 8 / elapsed / 1e6, {"bytes": sent}
    finally:
        fwd.close()
        target.close()


def _free_port(kind: str) -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM if kind == "tcp" else socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class _UdpSink(asyncio.DatagramProtocol):
    def __init__(self, payload_len: int, corrupt: bool):
        self.payload_len = payload_len
        self.corrupt = corrupt
        self.seen: set[int] = set()
        self.first = self.last = None
        self.error: Optional[str] = None

    def datagram_received(self, data, addr):
        now = time.monotonic()
        if self.first is None:
            self.first = now
        self.last = now
        if self.corrupt and len(self.seen) == 10:
            data = data[:-1] + bytes([data[-1] ^ 0xFF])
        seq = struct.unpack_from("!I", data)[0] if len(data) >= 4 else -1
        if len(data) != self.payload_len or data != _udp_payload(seq, self.payload_len):
            self.error = self.error or f"datagram {seq} corrupted"
            return
        self.seen.add(seq)


def _udp_payload(seq: int, size: int) -> bytes:
    head = struct.pack("!I", seq)
    return head + (head * (size // 4 + 1))[: size - 4]


async def _udp_goodput(conv, duration: float, corrupt: bool, rate_mbps: float) -> tuple[float, dict]:
    loop = asyncio.get_running_loop()
    sink_t, sink = await loop.create_datagram_endpoint(lambda: _UdpSink(UDP_PAYLOAD, corrupt),
                                                       local_addr=("127.0.0.1", 0))
    tune_socket(sink_t.get_extra_info("socket"), UDP_SOCKET_BUFFER)
    tport = sink_t.get_extra_info("sockname")[1]
    fwd = await client_forward(conv, ForwardingSpec("udp", "127.0.0.1", _free_port("udp"), "127.0.0.1", tport))
    send_t, _ = await loop.create_datagram_endpoint(asyncio.DatagramProtocol, remote_addr=fwd.address)
    tune_socket(send_t.get_extra_info("socket"), UDP_SOCKET_BUFFER)
    try:
        per_second = rate_mbps * 1e6 / 8 / UDP_PAYLOAD
        start = time.monotonic()
        sent = 0
        while (now := time.monotonic()) - start < duration:
            due = int((now - start) * per_second) + 1
            while sent < due:
                send_t.sendto(_udp_payload(sent, UDP_PAYLOAD))
                sent += 1
            await asyncio.sleep(0.001)
        settle = time.monotonic() + 5
        while len(sink.seen) < sent and time.monotonic() < settle and sink.error is None:
            await asyncio.sleep(0.01)
        if sink.error is not None:
            raise BenchError(sink.error)
        ratio = len(sink.seen) / sent
        # Like the TCP sink, goodput is timed at the receiver.
        window = (sink.last - sink.first) if len(sink.seen) > 1 else 0.0
        goodput = len(sink.seen) * UDP_PAYLOAD * 8 / window / 1e6 if window > 0 else 0.0
        return goodput, {"sent": sent, "delivered": len(sink.seen), "delivery_ratio": round(ratio, 6),
                         "tunnel_in": fwd.forwarded, "tunnel_dropped": fwd.dropped + fwd.oversized}
    finally:
        send_t.close()
        fwd.close()
        sink_t.close()


async def measure_forward_throughput(protocol: str, duration: float = 5.0, *, n: int = 1, corrupt: bool = False,
                                     rate_mbps: float = UDP_RATE_MBPS,
                                     options: Optional[TransportOptions] = None) -> RunReport:
    """Goodput in Mbps through a TCP or UDP forward on loopback.

    TCP pushes a verified byte stream as fast as the tunnel takes it. UDP
    sends sequence-numbered datagrams paced at ``rate_mbps`` and records
    the delivered/sent ratio in ``notes``. ``corrupt`` flips a byte at
    the sink to prove that corruption is detected.
    """
    if protocol not in ("tcp", "udp"):
        raise ValueError("protocol must be tcp or udp")
    if duration <= 0:
        raise ValueError("duration must be positive")
    _validate_n(n)
    report = RunReport(f"forward-{protocol}", unit="Mbps")
    async with LoopbackRig(options=options) as rig:
        conv = await rig.connect()
        try:
            for _ in range(n):
                if protocol == "tcp":
                    value, notes = await _tcp_goodput(conv, duration, corrupt)
                else:
                    value, notes = await _udp_goodput(conv, duration, corrupt, rate_mbps)
                report.samples.append(value)
                for k, v in notes.items():
                    report.notes[k] = min(report.notes.get(k, v), v) if k == "delivery_ratio" else v
        except SessionError as exc:
            raise BenchError(f"forwarding failed: {exc}") from exc
        finally:
            await conv.aclose()
    return report


async def probe_rtt(proxy: LatencyProxy, n: int = 10) -> list[float]:
    """Round-trip times in ms of small UDP probes through ``proxy``.

    The proxy's upstream must echo datagrams; see :func:`udp_echo_server`.
    """
    loop = asyncio.get_running_loop()
    results = []
    queue: asyncio.Queue = asyncio.Queue()

    class Probe(asyncio.DatagramProtocol):
        def datagram_received(self, data, addr):
            queue.put_nowait((time.monotonic(), data))

    transport, _ = await loop.create_datagram_endpoint(Probe, remote_addr=proxy.address)
    try:
        for i in range(n):
            payload = struct.pack("!I", i)
            t0 = time.monotonic()
            transport.sendto(payload)
            try:
                t1, data = await asyncio.wait_for(queue.get(), 5)
            except asyncio.TimeoutError:
                raise ProxyError("probe lost") from None
            if data != payload:
                raise ProxyError("probe came back altered")
            results.append((t1 - t0) * 1000)
    finally:
        transport.close()
    return results


@contextlib.asynccontextmanager
async def udp_echo_server():
    class Echo(asyncio.DatagramProtocol):
        def connection_made(self, transport):
            self.transport = transport

        def datagram_received(self, data, addr):
            self.transport.sendto(data, addr)

    transport, _ = await asyncio.get_running_loop().create_datagram_endpoint(Echo, local_addr=("127.0.0.1", 0))
    try:
        yield transport.get_extra_info("sockname")[:2]
    finally:
        transport.close()
