import os
import random

import pytest
from aioquic.buffer import Buffer
from hypothesis import given, settings
from hypothesis import strategies as st

from quicshell import wire
from quicshell.wire import (
    ChannelPreamble, Data, ExecRequest, ExitSignal, ExitStatus, FrameDecoder, MalformedError,
    NeedMoreData, PtyRequest, ShellRequest, UdpFrame, UnknownChannelType, UnknownMessage,
    WindowChange,
)

# Reference vectors for the QUIC variable-length integer encoding
# (value, minimal encoding) as published with the QUIC transport.
RFC_VECTORS = [
    (151288809941952652, bytes.fromhex("c2197c5eff14e88c")),
    (494878333, bytes.fromhex("9d7f3e7d")),
    (15293, bytes.fromhex("7bbd")),
    (37, bytes.fromhex("25")),
    (0, bytes.fromhex("00")),
]


def aioquic_varint(value):
    buf = Buffer(capacity=8)
    buf.push_uint_var(value)
    return buf.data


varints = st.integers(min_value=0, max_value=wire.MAX_VARINT)
text = st.text(max_size=40)
small = st.integers(min_value=0, max_value=1 << 20)

messages = st.one_of(
    st.builds(PtyRequest, text, varints, varints),
    st.just(ShellRequest()),
    st.builds(ExecRequest, text),
    st.builds(WindowChange, varints, varints),
    st.builds(Data, st.sampled_from([0, 1, 2]), st.binary(max_size=300)),
    st.builds(ExitStatus, varints),
    st.builds(ExitSignal, text, st.booleans(), text),
)

hosts = st.text(min_size=1, max_size=30)
ports = st.integers(min_value=1, max_value=65535)
preambles = st.one_of(
    st.just(ChannelPreamble.session()),
    st.builds(ChannelPreamble.tcp, hosts, ports),
    st.builds(ChannelPreamble.udp, hosts, ports, varints),
)


class TestVarint:
    @pytest.mark.parametrize("value,encoded", RFC_VECTORS)
    def test_reference_vectors(self, value, encoded):
        assert wire.encode_varint(value) == encoded
        assert wire.decode_varint(encoded) == (value, len(encoded))

    def test_documented_examples(self):
        assert wire.encode_varint(0) == b"\x00"
        assert wire.encode_varint(37) == b"\x25"
        assert wire.encode_varint(15293) == b"\x7b\xbd"
        assert wire.decode_varint(b"\x25") == (37, 1)
        assert wire.decode_varint(b"\x00") == (0, 1)

    def test_truncated_prefix_needs_more(self):
        with pytest.raises(NeedMoreData):
            wire.decode_varint(b"\x7b")
        with pytest.raises(NeedMoreData):
            wire.decode_varint(b"")

    def test_non_minimal_forms_accepted(self):
        assert wire.decode_varint(bytes.fromhex("4025")) == (37, 2)
        assert wire.decode_varint(bytes.fromhex("80000025")) == (37, 4)
        assert wire.decode_varint(bytes.fromhex("c000000000000025")) == (37, 8)

    @pytest.mark.parametrize("bad", [-1, 1 << 62, 1 << 70])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            wire.encode_varint(bad)

    @given(varints)
    def test_matches_independent_encoder(self, value):
        encoded = wire.encode_varint(value)
        assert encoded == aioquic_varint(value)
        assert wire.decode_varint(encoded) == (value, len(encoded))

    @given(varints)
    def test_minimal_length(self, value):
        size = len(wire.encode_varint(value))
        assert size in (1, 2, 4, 8)
        limits = {1: 1 << 6, 2: 1 << 14, 4: 1 << 30, 8: 1 << 62}
        assert value < limits[size]
        if size > 1:
            assert value >= limits[size // 2]

    def test_decoder_respects_offset(self):
        buf = b"\xff" + wire.encode_varint(15293) + b"\xff"
        assert wire.decode_varint(buf, 1) == (15293, 2)


class TestMessages:
    def test_exit_status_layout(self):
        assert wire.encode_message(ExitStatus(0)) == b"\x20\x00"

    def test_data_layout(self):
        assert wire.encode_message(Data(1, b"hi")) == b"\x10\x01\x02hi"

    def test_frame_has_outer_length(self):
        assert wire.encode_frame(Data(1, b"hi")) == b"\x05\x10\x01\x02hi"

    def test_signal_layout(self):
        assert wire.encode_message(ExitSignal("TERM", True, "")) == b"\x21\x04TERM\x01\x00"

    @settings(max_examples=500)
    @given(messages)
    def test_round_trip(self, msg):
        body = wire.encode_message(msg)
        assert wire.decode_message(body) == (msg, len(body))
        frame = wire.encode_frame(msg)
        assert wire.decode_frame(frame) == (msg, len(frame))

    @given(messages, st.data())
    def test_truncated_message_needs_more(self, msg, data):
        body = wire.encode_message(msg)
        cut = data.draw(st.integers(min_value=0, max_value=len(body) - 1))
        with pytest.raises(NeedMoreData):
            wire.decode_message(body[:cut])

    def test_invalid_kind_rejected(self):
        with pytest.raises(ValueError):
            wire.encode_message(Data(3, b""))
        with pytest.raises(MalformedError):
            wire.decode_message(b"\x10\x03\x00")

    def test_invalid_bool_rejected(self):
        with pytest.raises(MalformedError):
            wire.decode_message(b"\x21\x00\x02\x00")

    def test_invalid_utf8_rejected(self):
        with pytest.raises(MalformedError):
            wire.decode_message(b"\x03\x01\xff")

    def test_unknown_type_carries_code_and_skip_length(self):
        frame = b"\x03\x3f\xaa\xbb"
        with pytest.raises(UnknownMessage) as info:
            wire.decode_frame(frame)
        assert info.value.code == 0x3F
        assert info.value.consumed == 4

    def test_stream_decoder_skips_unknown(self):
        dec = FrameDecoder()
        dec.feed(b"\x03\x3f\xaa\xbb" + wire.encode_frame(ExitStatus(3)))
        assert dec.next() == ExitStatus(3)
        assert dec.skipped == 1
        assert dec.next() is None

    def test_stream_decoder_byte_at_a_time(self):
        msgs = [Data(1, os.urandom(200)), WindowChange(120, 40), ExitStatus(0)]
        stream = b"".join(wire.encode_frame(m) for m in msgs)
        dec = FrameDecoder()
        out = []
        for b in stream:
            dec.feed(bytes([b]))
            m = dec.next()
            if m is not None:
                out.append(m)
        assert out == msgs

    def test_trailing_bytes_in_frame_rejected(self):
        with pytest.raises(MalformedError):
            wire.decode_frame(b"\x03\x20\x00\x00")

    def test_split_data(self):
        payload = os.urandom(10)
        parts = list(wire.split_data(1, payload, limit=4))
        assert [len(p.payload) for p in parts] == [4, 4, 2]
        assert b"".join(p.payload for p in parts) == payload

    def test_oversized_payload_refused(self):
        with pytest.raises(ValueError):
            wire.encode_message(Data(1, bytes(wire.MAX_DATA_PAYLOAD + 1)))


class TestPreamble:
    def test_session_layout(self):
        assert wire.encode_preamble(ChannelPreamble.session()) == b"\x07session"

    def test_udp_round_trip(self):
        p = ChannelPreamble.udp("127.0.0.1", 5353, 4)
        enc = wire.encode_preamble(p)
        assert wire.decode_preamble(enc) == (p, len(enc))

    def test_bad_port_rejected(self):
        with pytest.raises(ValueError, match="port"):
            wire.encode_preamble(ChannelPreamble("direct-tcp", "", 0))

    def test_unknown_type_is_semantic_error(self):
        enc = b"\x05x11xx"
        with pytest.raises(UnknownChannelType) as info:
            wire.decode_preamble(enc)
        assert info.value.channel_type == "x11xx"

    @given(preambles)
    def test_round_trip(self, p):
        enc = wire.encode_preamble(p)
        assert wire.decode_preamble(enc) == (p, len(enc))


class TestUdpFrame:
    def test_layout(self):
        assert wire.encode_udp_frame(UdpFrame(4, b"\xaa\xbb\xcc")) == b"\x04\xaa\xbb\xcc"
        assert wire.encode_udp_frame(UdpFrame(4, b"")) == b"\x04"

    def test_empty_is_error(self):
        with pytest.raises(MalformedError):
            wire.decode_udp_frame(b"")

    @given(st.builds(UdpFrame, varints, st.binary(max_size=1200)))
    def test_round_trip(self, f):
        assert wire.decode_udp_frame(wire.encode_udp_frame(f)) == f


def decode_everything(buf):
    """Run every decoder over ``buf``; only codec errors may escape."""
    for fn in (wire.decode_frame, wire.decode_message, wire.decode_preamble, wire.decode_udp_frame,
               wire.decode_varint):
        try:
            fn(buf)
        except wire.WireError:
            pass


@settings(max_examples=2000)
@given(st.binary(max_size=64))
def test_fuzz_decoders_never_crash(buf):
    decode_everything(buf)


def test_fuzz_random_noise_sample():
    rng = random.Random(7)
    for _ in range(20000):
        decode_everything(rng.randbytes(rng.randint(0, 48)))
