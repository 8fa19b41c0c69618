"""Byte-level codec for everything quicshell puts on the wire.

Channel streams start with a preamble and then carry frames::

    frame = total_length:varint  type_code:varint  fields...

Integers use the QUIC variable-length encoding, strings and byte payloads
are varint-length-prefixed and booleans take one byte. UDP forwarding
datagrams are ``datagram_id:varint`` followed by the raw payload.

Decoders never read past the buffer they are given. Truncation raises
:class:`NeedMoreData` and anything that cannot become valid by appending
bytes raises :class:`MalformedError`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, Optional, Union

MAX_VARINT = (1 << 62) - 1
MAX_DATA_PAYLOAD = 1 << 24


class WireError(ValueError):
    pass


class NeedMoreData(WireError):
    """The buffer ends before the value does."""


class MalformedError(WireError):
    pass


class UnknownMessage(WireError):
    """A well-framed message with a type code this version does not know.

    ``consumed`` is the full frame size so callers can skip it.
    """

    def __init__(self, code: int, consumed: int = 0):
        super().__init__(f"unknown message type 0x{code:02x}")
        self.code = code
        self.consumed = consumed


class UnknownChannelType(WireError):
    def __init__(self, channel_type: str, consumed: int = 0):
        super().__init__(f"unknown channel type {channel_type!r}")
        self.channel_type = channel_type
        self.consumed = consumed


# -- varints ---------------------------------------------------------------

def encode_varint(value: int) -> bytes:
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeError("varint value must be an int")
    if value < 0 or value > MAX_VARINT:
        raise ValueError(f"varint value out of range: {value}")
    if value < 0x40:
        return bytes((value,))
    if value < 0x4000:
        return (value | 0x4000).to_bytes(2, "big")
    if value < 0x4000_0000:
        return (value | 0x8000_0000).to_bytes(4, "big")
    return (value | 0xC000_0000_0000_0000).to_bytes(8, "big")


def decode_varint(buf, offset: int = 0) -> tuple[int, int]:
    """Return ``(value, consumed)`` for the varint at ``buf[offset]``.

    Non-minimal encodings are accepted, as QUIC does.
    """
    if offset >= len(buf):
        raise NeedMoreData("empty varint")
    first = buf[offset]
    size = 1 << (first >> 6)
    end = offset + size
    if end > len(buf):
        raise NeedMoreData(f"varint needs {size} bytes")
    value = first & 0x3F
    for i in range(offset + 1, end):
        value = (value << 8) | buf[i]
    return value, size


# -- primitive field helpers ------------------------------------------------

def _encode_bytes(data: bytes) -> bytes:
    return encode_varint(len(data)) + data


def _encode_str(text: str) -> bytes:
    return _encode_bytes(text.encode("utf-8"))


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf, pos: int = 0, end: Optional[int] = None):
        self.buf = buf
        self.pos = pos
        self.end = len(buf) if end is None else end

    def varint(self) -> int:
        if self.pos >= self.end:
            raise NeedMoreData("field truncated")
        size = 1 << (self.buf[self.pos] >> 6)
        if self.pos + size > self.end:
            raise NeedMoreData("field truncated")
        value, used = decode_varint(self.buf, self.pos)
        self.pos += used
        return value

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise NeedMoreData("field truncated")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def bytes_(self) -> bytes:
        return self.raw(self.varint())

    def str_(self) -> str:
        data = self.bytes_()
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedError(f"invalid UTF-8: {exc}") from None

    def bool_(self) -> bool:
        b = self.raw(1)[0]
        if b > 1:
            raise MalformedError(f"invalid boolean byte {b}")
        return bool(b)


def _check_varint(name: str, value) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= MAX_VARINT:
        raise ValueError(f"{name} must be an integer in [0, 2^62)")


# -- messages ----------------------------------------------------------------

class DataKind(enum.IntEnum):
    STDIN = 0
    STDOUT = 1
    STDERR = 2


@dataclass(frozen=True)
class PtyRequest:
    term: str
    cols: int
    rows: int
    type_code = 0x01

    def _fields(self) -> bytes:
        _check_varint("cols", self.cols)
        _check_varint("rows", self.rows)
        return _encode_str(self.term) + encode_varint(self.cols) + encode_varint(self.rows)

    @classmethod
    def _read(cls, r: _Reader):
        return cls(r.str_(), r.varint(), r.varint())


@dataclass(frozen=True)
class ShellRequest:
    type_code = 0x02

    def _fields(self) -> bytes:
        return b""

    @classmethod
    def _read(cls, r: _Reader):
        return cls()


@dataclass(frozen=True)
class ExecRequest:
    command: str
    type_code = 0x03

    def _fields(self) -> bytes:
        return _encode_str(self.command)

    @classmethod
    def _read(cls, r: _Reader):
        return cls(r.str_())


@dataclass(frozen=True)
class WindowChange:
    cols: int
    rows: int
    type_code = 0x04

    def _fields(self) -> bytes:
        _check_varint("cols", self.cols)
        _check_varint("rows", self.rows)
        return encode_varint(self.cols) + encode_varint(self.rows)

    @classmethod
    def _read(cls, r: _Reader):
        return cls(r.varint(), r.varint())


@dataclass(frozen=True)
class Data:
    kind: int
    payload: bytes
    type_code = 0x10

    def _fields(self) -> bytes:
        if self.kind not in (0, 1, 2):
            raise ValueError(f"data kind must be 0, 1 or 2, got {self.kind!r}")
        if len(self.payload) > MAX_DATA_PAYLOAD:
            raise ValueError("data payload exceeds 2^24 bytes; use split_data")
        return encode_varint(self.kind) + _encode_bytes(bytes(self.payload))

    @classmethod
    def _read(cls, r: _Reader):
        kind = r.varint()
        if kind > 2:
            raise MalformedError(f"invalid data kind {kind}")
        size = r.varint()
        if size > MAX_DATA_PAYLOAD:
            raise MalformedError("data payload exceeds 2^24 bytes")
        return cls(kind, r.raw(size))


@dataclass(frozen=True)
class ExitStatus:
    code: int
    type_code = 0x20

    def _fields(self) -> bytes:
        _check_varint("exit code", self.code)
        return encode_varint(self.code)

    @classmethod
    def _read(cls, r: _Reader):
        return cls(r.varint())


@dataclass(frozen=True)
class ExitSignal:
    signal_name: str
    core_dumped: bool = False
    error_message: str = ""
    type_code = 0x21

    def _fields(self) -> bytes:
        return (_encode_str(self.signal_name) + (b"\x01" if self.core_dumped else b"\x00")
                + _encode_str(self.error_message))

    @classmethod
    def _read(cls, r: _Reader):
        return cls(r.str_(), r.bool_(), r.str_())


Message = Union[PtyRequest, ShellRequest, ExecRequest, WindowChange, Data, ExitStatus, ExitSignal]

MESSAGE_TYPES = {cls.type_code: cls for cls in
                 (PtyRequest, ShellRequest, ExecRequest, WindowChange, Data, ExitStatus, ExitSignal)}


def encode_message(message: Message) -> bytes:
    """Type code followed by the fields, without the outer frame length."""
    if MESSAGE_TYPES.get(getattr(message, "type_code", None)) is not type(message):
        raise TypeError(f"not a message: {message!r}")
    return encode_varint(message.type_code) + message._fields()


def decode_message(buf, offset: int = 0, end: Optional[int] = None) -> tuple[Message, int]:
    r = _Reader(buf, offset, end)
    code = r.varint()
    cls = MESSAGE_TYPES.get(code)
    if cls is None:
        raise UnknownMessage(code)
    msg = cls._read(r)
    return msg, r.pos - offset


def encode_frame(message: Message) -> bytes:
    body = encode_message(message)
    return encode_varint(len(body)) + body


def decode_frame(buf, offset: int = 0) -> tuple[Message, int]:
    """Decode one length-prefixed frame.

    Raises :class:`UnknownMessage` with ``consumed`` set to the frame size
    when the type is unknown, so the caller can skip ahead.
    """
    length, used = decode_varint(buf, offset)
    start = offset + used
    end = start + length
    if end > len(buf):
        raise NeedMoreData("frame truncated")
    if length == 0:
        raise MalformedError("empty frame")
    try:
        msg, consumed = decode_message(buf, start, end)
    except UnknownMessage as exc:
        exc.consumed = end - offset
        raise
    except NeedMoreData:
        raise MalformedError("frame shorter than its fields") from None
    if consumed != length:
        raise MalformedError("trailing bytes inside frame")
    return msg, end - offset


def split_data(kind: int, payload: bytes, limit: int = MAX_DATA_PAYLOAD) -> Iterator[Data]:
    """Yield Data messages carrying ``payload`` in pieces of at most ``limit`` bytes."""
    if not payload:
        yield Data(kind, b"")
        return
    view = memoryview(payload)
    for i in range(0, len(payload), limit):
        yield Data(kind, bytes(view[i:i + limit]))


class FrameDecoder:
    """Incremental frame decoder for a byte stream.

    Unknown message types are skipped and counted in ``skipped``.
    """

    def __init__(self):
        self._buf = bytearray()
        self.skipped = 0
        self.skipped_bytes = 0

    def feed(self, data: bytes) -> None:
        self._buf += data

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def pop(self) -> Optional[tuple[Message, int]]:
        """Next message and the number of stream bytes it used (skipped
        unknown frames included), or None if no complete frame is buffered."""
        skipped = 0
        while True:
            try:
                msg, consumed = decode_frame(self._buf)
            except NeedMoreData:
                if skipped:
                    self.skipped_bytes += skipped
                return None
            except UnknownMessage as exc:
                del self._buf[:exc.consumed]
                self.skipped += 1
                skipped += exc.consumed
                continue
            del self._buf[:consumed]
            return msg, consumed + skipped

    def next(self) -> Optional[Message]:
        item = self.pop()
        return None if item is None else item[0]


# -- channel preambles ------------------------------------------------------------

SESSION = "session"
DIRECT_TCP = "direct-tcp"
DIRECT_UDP = "direct-udp"
CHANNEL_TYPES = (SESSION, DIRECT_TCP, DIRECT_UDP)


@dataclass(frozen=True)
class ChannelPreamble:
    channel_type: str
    target_host: Optional[str] = None
    target_port: Optional[int] = None
    datagram_id: Optional[int] = None

    def validate(self) -> None:
        if self.channel_type not in CHANNEL_TYPES:
            raise UnknownChannelType(self.channel_type)
        if self.channel_type == SESSION:
            if (self.target_host, self.target_port, self.datagram_id) != (None, None, None):
                raise ValueError("session preambles carry no target")
            return
        if not isinstance(self.target_port, int) or not 1 <= self.target_port <= 65535:
            raise ValueError(f"target port must be in [1, 65535], got {self.target_port!r}")
        if not self.target_host:
            raise ValueError("target host must be non-empty")
        if self.channel_type == DIRECT_UDP:
            _check_varint("datagram_id", self.datagram_id)
        elif self.datagram_id is not None:
            raise ValueError("only direct-udp preambles carry a datagram id")

    @classmethod
    def session(cls):
        return cls(SESSION)

    @classmethod
    def tcp(cls, host: str, port: int):
        return cls(DIRECT_TCP, host, port)

    @classmethod
    def udp(cls, host: str, port: int, datagram_id: int):
        return cls(DIRECT_UDP, host, port, datagram_id)


def encode_preamble(preamble: ChannelPreamble) -> bytes:
    preamble.validate()
    out = _encode_str(preamble.channel_type)
    if preamble.channel_type != SESSION:
        out += _encode_str(preamble.target_host) + encode_varint(preamble.target_port)
        if preamble.channel_type == DIRECT_UDP:
            out += encode_varint(preamble.datagram_id)
    return out


def decode_preamble(buf, offset: int = 0) -> tuple[ChannelPreamble, int]:
    r = _Reader(buf, offset)
    channel_type = r.str_()
    if channel_type == SESSION:
        return ChannelPreamble(SESSION), r.pos - offset
    if channel_type not in CHANNEL_TYPES:
        raise UnknownChannelType(channel_type, r.pos - offset)
    host = r.str_()
    port = r.varint()
    datagram_id = r.varint() if channel_type == DIRECT_UDP else None
    if not 1 <= port <= 65535:
        raise MalformedError(f"target port out of range: {port}")
    if not host:
        raise MalformedError("empty target host")
    return ChannelPreamble(channel_type, host, port, datagram_id), r.pos - offset


# -- UDP datagram frames -----------------------------------------------------------

@dataclass(frozen=True)
class UdpFrame:
    datagram_id: int
    payload: bytes = b""


def encode_udp_frame(frame: UdpFrame) -> bytes:
    return encode_varint(frame.datagram_id) + bytes(frame.payload)


def decode_udp_frame(buf) -> UdpFrame:
    """A datagram is complete by construction, so truncation is malformed."""
    if not buf:
        raise MalformedError("empty datagram")
    try:
        datagram_id, used = decode_varint(buf)
    except NeedMoreData:
        raise MalformedError("truncated datagram id") from None
    return UdpFrame(datagram_id, bytes(buf[used:]))


def udp_header_size(datagram_id: int) -> int:
    return len(encode_varint(datagram_id))
