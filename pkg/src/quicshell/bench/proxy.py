"""UDP relay that adds a fixed one-way delay in each direction.

The relay runs in its own interpreter (see ``_relay``) so that its timing
does not depend on the event loop under test. It schedules sends with
``select`` timeouts, which have microsecond resolution, and logs every
packet it relays.
"""

from __future__ import annotations

import json
import subprocess
import sys
from dataclasses import dataclass
from typing import Optional

C2S, S2C = 0, 1
BUFFER = 4 << 20


@dataclass(frozen=True)
class PacketEvent:
    received: float  # time.monotonic() when the proxy read the packet
    sent: float  # when it was forwarded
    direction: int  # C2S or S2C
    size: int
    client_port: int = 0  # identifies the client connection


class ProxyError(RuntimeError):
    pass


class LatencyProxy:
    """Adds ``delay_ms`` each way between clients and ``upstream``.

    Use as an async context manager or call :meth:`start` / :meth:`close`.
    """

    def __init__(self, upstream, delay_ms: float, listen=("127.0.0.1", 0)):
        if delay_ms < 0:
            raise ValueError("delay must be >= 0")
        self.upstream = tuple(upstream)
        self.delay_ms = delay_ms
        self.listen = listen
        self.address: Optional[tuple] = None
        self._proc = None

    def start(self) -> tuple:
        host, port = self.listen
        self._proc = subprocess.Popen(
            [sys.executable, "-m", "quicshell.bench._relay", host, str(port), self.upstream[0],
             str(self.upstream[1]), repr(self.delay_ms / 1000)],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        line = self._proc.stdout.readline()
        if not line:
            self._proc.wait()
            self._proc = None
            raise ProxyError("latency proxy did not start")
        status, value = json.loads(line)
        if status != "ready":
            self._proc.wait()
            self._proc = None
            raise ProxyError(f"latency proxy cannot listen on {self.listen}: {value}")
        self.address = tuple(value)
        return self.address

    def _call(self, cmd):
        if self._proc is None:
            raise ProxyError("proxy not running")
        try:
            self._proc.stdin.write(cmd + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        except OSError as exc:
            raise ProxyError(f"proxy unavailable: {exc}") from None
        if not line:
            raise ProxyError("proxy exited")
        return json.loads(line)

    def events(self) -> list[PacketEvent]:
        return [PacketEvent(*e) for e in self._call("events")]

    def clear(self) -> None:
        self._call("clear")

    def cut(self) -> None:
        """Silently drop everything from now on, as a dead path would."""
        self._call("cut")

    def close(self) -> None:
        if self._proc is None:
            return
        proc, self._proc = self._proc, None
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
        proc.stdout.close()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.close()

    async def __aenter__(self):
        self.start()
        return self

    async def __aexit__(self, *exc):
        self.close()


def count_round_trips(events, delivered_at: float) -> int:
    """Client flights needed until the packet that arrived by ``delivered_at``.

    Packets are taken in the order the proxy read them. A flight is a run
    of client-to-server packets with no server-to-client packet between
    them, so each new flight means the client waited for the server. The
    packet that delivered the message is the last client packet the proxy
    forwarded at or before ``delivered_at``.
    """
    ordered = sorted(events, key=lambda e: e.received)
    delivering = None
    for i, e in enumerate(ordered):
        if e.direction == C2S and e.sent <= delivered_at:
            if delivering is None or e.sent >= ordered[delivering].sent:
                delivering = i
    if delivering is None:
        raise ValueError("no client packet was delivered before the given time")
    flights, previous = 0, None
    for e in ordered[:delivering + 1]:
        if e.direction == C2S and previous != C2S:
            flights += 1
        previous = e.direction
    return flights

