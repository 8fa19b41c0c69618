"""Child process of :class:`LatencyProxy`.

Commands arrive one per line on stdin; replies are JSON lines on stdout.
"""

import heapq
import itertools
import json
import os
import select
import socket
import sys
import time

from .proxy import BUFFER, C2S, S2C


def _socket(bind=None, connect=None) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
        try:
            s.setsockopt(socket.SOL_SOCKET, opt, BUFFER)
        except OSError:
            pass
    if bind is not None:
        s.bind(bind)
    if connect is not None:
        s.connect(connect)
    s.setblocking(False)
    return s


def _reply(value) -> None:
    sys.stdout.write(json.dumps(value) + "\n")
    sys.stdout.flush()


def _relay(listen, upstream, delay: float) -> None:
    try:
        front = _socket(bind=listen)
    except OSError as exc:
        _reply(["error", str(exc)])
        return
    _reply(["ready", front.getsockname()])
    control = sys.stdin.fileno()
    upstreams: dict = {}  # client address -> socket towards the server
    clients: dict = {}  # upstream socket -> client address
    queue: list = []
    seq = itertools.count()
    events: list = []
    online = True

    def enqueue(now, direction, data, sock, dest, port):
        heapq.heappush(queue, (now + delay, next(seq), direction, data, sock, dest, now, port))

    while True:
        timeout = max(0.0, queue[0][0] - time.monotonic()) if queue else 0.5
        readable, _, _ = select.select([control, front, *clients], [], [], timeout)
        now = time.monotonic()
        for r in readable:
            if r is control:
                cmd = os.read(control, 64).decode().strip()
                if cmd in ("", "stop"):
                    for s in (front, *clients):
                        s.close()
                    return
                if cmd == "events":
                    _reply(events)
                elif cmd == "clear":
                    events = []
                    _reply(True)
                elif cmd == "cut":
                    online = False
                    queue.clear()
                    _reply(True)
                continue
            while True:
                try:
                    if r is front:
                        data, addr = front.recvfrom(65536)
                    else:
                        data, addr = r.recv(65536), None
                except (BlockingIOError, ConnectionRefusedError):
                    break
                if not online:
                    continue
                if r is front:
                    sock = upstreams.get(addr)
                    if sock is None:
                        sock = upstreams[addr] = _socket(connect=upstream)
                        clients[sock] = addr
                    enqueue(now, C2S, data, sock, None, addr[1])
                else:
                    enqueue(now, S2C, data, front, clients[r], clients[r][1])
        while queue and queue[0][0] <= time.monotonic():
            _, _, direction, data, sock, dest, received, port = heapq.heappop(queue)
            try:
                if dest is None:
                    sock.send(data)
                else:
                    sock.sendto(data, dest)
            except OSError:
                continue
            events.append((received, time.monotonic(), direction, len(data), port))


if __name__ == "__main__":
    _host, _port, _up_host, _up_port, _delay = sys.argv[1:6]
    _relay((_host, int(_port)), (_up_host, int(_up_port)), float(_delay))
