"""QUIC configuration and per-connection instrumentation.

aioquic lacks three things quicshell needs, so they are added here per
connection instance rather than by patching the library globally:

* a TLS exporter, rebuilt from the exporter master secret captured when the
  1-RTT keys are installed;
* consumption-based stream credit, so a channel whose reader stalls stops
  receiving once its window is full instead of buffering without bound;
* a larger initial congestion window, so responses of a few hundred
  kilobytes leave in the first flight.
"""

from __future__ import annotations

import socket
import ssl
from dataclasses import dataclass
from typing import Optional

from aioquic.h3.connection import H3_ALPN
from aioquic.quic.configuration import QuicConfiguration
from aioquic.quic.congestion.base import register_congestion_control
from aioquic.quic.congestion.reno import RenoCongestionControl
from aioquic.quic.connection import MAX_STREAM_DATA_FRAME_CAPACITY, QuicConnection
from aioquic.quic.packet import QuicFrameType

from ..auth.exporter import tls13_export

DEFAULT_MAX_DATAGRAM_SIZE = 1350
DEFAULT_INITIAL_WINDOW = 256
DEFAULT_STREAM_WINDOW = 1 << 20
DATAGRAM_OVERHEAD = 64


@dataclass
class TransportOptions:
    max_datagram_size: int = DEFAULT_MAX_DATAGRAM_SIZE
    initial_window: int = DEFAULT_INITIAL_WINDOW  # packets
    stream_window: int = DEFAULT_STREAM_WINDOW
    connection_window: int = 16 << 20
    idle_timeout: float = 60.0
    socket_buffer: int = 4 << 20
    max_streams: int = 256

    @property
    def datagram_capacity(self) -> int:
        """Largest HTTP datagram payload that always fits in one packet."""
        return self.max_datagram_size - DATAGRAM_OVERHEAD


class _WideWindowReno(RenoCongestionControl):
    def __init__(self, *, max_datagram_size: int, packets: int):
        super().__init__(max_datagram_size=max_datagram_size)
        self.congestion_window = packets * max_datagram_size


def congestion_algorithm(packets: int) -> str:
    name = f"reno-iw{packets}"
    register_congestion_control(
        name, lambda *, max_datagram_size: _WideWindowReno(max_datagram_size=max_datagram_size,
                                                           packets=packets))
    return name


def quic_configuration(*, is_client: bool, options: TransportOptions, certfile=None, keyfile=None,
                       cafile=None, verify: bool = True, server_name: Optional[str] = None) -> QuicConfiguration:
    cfg = QuicConfiguration(
        is_client=is_client,
        alpn_protocols=H3_ALPN,
        max_datagram_frame_size=65536,
        max_datagram_size=options.max_datagram_size,
        max_data=options.connection_window,
        max_stream_data=options.stream_window,
        idle_timeout=options.idle_timeout,
        congestion_control_algorithm=congestion_algorithm(options.initial_window),
        server_name=server_name,
    )
    if certfile:
        cfg.load_cert_chain(certfile, keyfile)
    if is_client:
        if not verify:
            cfg.verify_mode = ssl.CERT_NONE
        elif cafile:
            cfg.load_verify_locations(cafile)
    return cfg


def tune_socket(sock: socket.socket, size: int) -> None:
    for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
        try:
            sock.setsockopt(socket.SOL_SOCKET, opt, size)
        except OSError:
            pass


class Instrumentation:
    """Hooks installed on one QuicConnection instance."""

    def __init__(self, quic: QuicConnection, options: TransportOptions):
        self.quic = quic
        self.window = options.stream_window
        self.hash_name: Optional[str] = None
        self._exporter_secret: Optional[bytes] = None
        self._consumed: dict[int, int] = {}
        self.credit_updates = 0

        quic._local_max_streams_bidi.value = max(quic._local_max_streams_bidi.value, options.max_streams)
        original_initialize = quic._initialize

        def _initialize(peer_cid):
            original_initialize(peer_cid)
            self._wrap_tls(quic.tls)

        quic._initialize = _initialize
        if getattr(quic, "tls", None) is not None:
            self._wrap_tls(quic.tls)

        self._original_limits = quic._write_stream_limits
        quic._write_stream_limits = self._write_stream_limits

    # -- exporter ---------------------------------------------------------------

    def _wrap_tls(self, tls) -> None:
        original = tls._setup_traffic_protection

        def setup(direction, epoch, label):
            if label == b"s ap traffic" and self._exporter_secret is None:
                self.hash_name = tls.key_schedule.algorithm.name
                self._exporter_secret = tls.key_schedule.derive_secret(b"exp master")
            return original(direction, epoch, label)

        tls._setup_traffic_protection = setup

    def export(self, label: bytes, context: bytes, length: int) -> Optional[bytes]:
        if self._exporter_secret is None:
            return None
        return tls13_export(self.hash_name, self._exporter_secret, label, context, length)

    # -- stream credit ------------------------------------------------------------

    def manage(self, stream_id: int) -> None:
        self._consumed.setdefault(stream_id, 0)

    def release(self, stream_id: int) -> None:
        self._consumed.pop(stream_id, None)

    def consumed(self, stream_id: int, nbytes: int) -> bool:
        """Record bytes handed to the application; True if new credit is due."""
        if stream_id not in self._consumed:
            return False
        self._consumed[stream_id] += nbytes
        stream = self.quic._streams.get(stream_id)
        if stream is None:
            return False
        target = self._consumed[stream_id] + self.window
        return target - stream.max_stream_data_local_sent >= self.window // 2

    def _write_stream_limits(self, builder, space, stream) -> None:
        consumed = self._consumed.get(stream.stream_id)
        if consumed is None:
            return self._original_limits(builder, space, stream)
        target = consumed + self.window
        if target > stream.max_stream_data_local and target - stream.max_stream_data_local >= self.window // 2:
            stream.max_stream_data_local = target
        if stream.max_stream_data_local_sent != stream.max_stream_data_local:
            buf = builder.start_frame(
                QuicFrameType.MAX_STREAM_DATA,
                capacity=MAX_STREAM_DATA_FRAME_CAPACITY,
                handler=self.quic._on_max_stream_data_delivery,
                handler_args=(stream,),
            )
            buf.push_uint_var(stream.stream_id)
            buf.push_uint_var(stream.max_stream_data_local)
            stream.max_stream_data_local_sent = stream.max_stream_data_local
            self.credit_updates += 1

    # -- send-side accounting -------------------------------------------------------

    def unacked(self, stream_id: int) -> int:
        """Bytes written to a stream that the peer has not acknowledged yet."""
        stream = self.quic._streams.get(stream_id)
        if stream is None:
            return 0
        return len(stream.sender._buffer)

    def acked_offset(self, stream_id: int) -> int:
        stream = self.quic._streams.get(stream_id)
        if stream is None:
            return 0
        return stream.sender._buffer_start

    def datagrams_pending(self) -> int:
        return len(self.quic._datagrams_pending)
