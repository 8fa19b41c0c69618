import asyncio
import random
import time

import pytest
from hypothesis import given, settings, strategies as st

from quicshell import wire
from quicshell.auth import Password, PrivateKey
from quicshell.auth.verify import Reason
from quicshell.session import (
    AuthenticationError, ChannelClosed, ChannelError, ChannelRejected, ConnectionSetupError, PathNotFound, Trust,
)

from .loopback import connect, running_server


async def echo(conv, ch):
    if ch.type == wire.DIRECT_UDP:
        while (payload := await ch.recv_datagram()) is not None:
            ch.send_datagram(payload)
        return
    async for msg in ch:
        await ch.send_message(msg)
    ch.close()


async def test_conversation_ids_agree(certs, store):
    async with running_server(certs, store, echo) as srv:
        for _ in range(3):
            conv = await connect(srv, certs)
            (server_conv,) = [c for c in srv.conversations if c.conversation_id == conv.conversation_id]
            assert bytes(server_conv.conversation_id) == bytes(conv.conversation_id)
            assert server_conv.username == "alice"
            await conv.aclose()


async def test_conversation_ids_differ_between_connections(certs, store):
    async with running_server(certs, store, echo) as srv:
        a = await connect(srv, certs)
        b = await connect(srv, certs)
        assert a.conversation_id != b.conversation_id
        await a.aclose()
        await b.aclose()


async def test_wrong_path_is_404_without_auth(certs, store):
    async with running_server(certs, store, echo) as srv:
        for path in ("/", "/ssh3", "/ssh3-e2e/", "/other"):
            with pytest.raises(PathNotFound):
                await connect(srv, certs, path=path)
        assert srv.authenticator.calls == 0
        assert srv.path_rejections == 4
        assert srv.conversations == set()


async def test_bad_password_gets_401_with_schemes(certs, store):
    async with running_server(certs, store, echo) as srv:
        with pytest.raises(AuthenticationError) as info:
            await connect(srv, certs, credential=Password("alice", "nope"))
        assert "Basic" in info.value.schemes
        assert srv.decisions[-1].reason is Reason.WRONG_PASSWORD


async def test_unauthorized_pubkey_advertises_bearer(certs, store, other_key):
    async with running_server(certs, store, echo) as srv:
        with pytest.raises(AuthenticationError) as info:
            await connect(srv, certs, credential=PrivateKey("alice", other_key))
        assert "Bearer" in info.value.schemes
        assert srv.decisions[-1].reason is Reason.KEY_NOT_AUTHORIZED


async def test_pubkey_login(certs, store, ed_key, rsa_key):
    async with running_server(certs, store, echo) as srv:
        for key in (ed_key, rsa_key):
            conv = await connect(srv, certs, credential=PrivateKey("alice", key))
            assert conv.username == "alice"
            await conv.aclose()


async def test_certificate_pin(certs, store):
    async with running_server(certs, store, echo) as srv:
        conv = await connect(srv, certs, trust=Trust(pin=certs[2]))
        await conv.aclose()
        with pytest.raises(ConnectionSetupError):
            await connect(srv, certs, trust=Trust(pin="00" * 32))


async def test_messages_arrive_in_order(certs, store):
    async with running_server(certs, store, echo) as srv:
        async with await connect(srv, certs) as conv:
            ch = conv.open_session()
            sent = [wire.Data(0, i.to_bytes(4, "big") * random.randint(1, 300)) for i in range(500)]
            for m in sent:
                ch.write(m)
            ch.close()
            got = [m async for m in ch]
            assert got == sent


async def test_first_message_rides_with_preamble(certs, store):
    seen = []

    async def handler(conv, ch):
        seen.append(ch.nowait())
        ch.close()

    async with running_server(certs, store, handler) as srv:
        async with await connect(srv, certs) as conv:
            ch = conv.open_session()
            ch.write(wire.ExecRequest("true"))
            assert await ch.next_message() is None
    assert seen == [wire.ExecRequest("true")]


async def test_end_of_channel_is_not_an_error(certs, store):
    async with running_server(certs, store, echo) as srv:
        async with await connect(srv, certs) as conv:
            ch = conv.open_session()
            ch.close()
            assert await ch.next_message() is None
            await asyncio.wait_for(ch.wait_closed(), 5)
            assert ch.state == "closed"
            assert ch.id not in conv.channels


async def test_peer_reset_raises_channel_closed(certs, store):
    async def refuse(conv, ch):
        ch.abort(ChannelError.REFUSED)

    async with running_server(certs, store, refuse) as srv:
        async with await connect(srv, certs) as conv:
            ch = conv.open_session()
            with pytest.raises(ChannelClosed) as info:
                await ch.next_message()
            assert info.value.code == ChannelError.REFUSED
            assert info.value.reason == "refused"


async def test_channel_limit_keeps_conversation_usable(certs, store):
    async with running_server(certs, store, echo, max_channels=2) as srv:
        async with await connect(srv, certs) as conv:
            assert conv.max_channels == 2
            a, b = conv.open_session(), conv.open_session()
            with pytest.raises(ChannelRejected):
                conv.open_session()
            # bypass the advertised limit to see the server enforce it
            conv.max_channels = None
            c = conv.open_session()
            with pytest.raises(ChannelClosed) as info:
                await c.next_message()
            assert info.value.code == ChannelError.CHANNEL_LIMIT
            await a.send_message(wire.Data(0, b"still here"))
            assert await a.next_message() == wire.Data(0, b"still here")
            b.close()
            assert await b.next_message() is None


async def test_concurrent_channels_do_not_interleave(certs, store):
    async def worker(conv, tag):
        ch = conv.open_session()
        payloads = [bytes([tag]) * random.randint(1, 5000) for _ in range(50)]
        for p in payloads:
            ch.write(wire.Data(1, p))
        ch.close()
        return payloads, [m.payload async for m in ch]

    async with running_server(certs, store, echo, max_channels=64) as srv:
        async with await connect(srv, certs) as conv:
            results = await asyncio.gather(*(worker(conv, t) for t in range(32)))
    for sent, got in results:
        assert sent == got


async def test_head_of_line_isolation(certs, store):
    paused = asyncio.Event()

    async def handler(conv, ch):
        if ch.preamble.channel_type == wire.SESSION and not paused.is_set():
            paused.set()
            await asyncio.sleep(3600)
        await echo(conv, ch)

    async with running_server(certs, store, handler) as srv:
        async with await connect(srv, certs) as conv:
            blocked = conv.open_session()
            for i in range(400):
                blocked.write(wire.Data(0, bytes(1024)))
            (server_conv,) = srv.conversations
            deadline = time.monotonic() + 5
            while True:
                server_b = server_conv.channels.get(blocked.id)
                if server_b is not None and server_b.queued >= server_b.queue_limit:
                    break
                assert time.monotonic() < deadline, "queue of the paused channel never filled"
                await asyncio.sleep(0.01)

            a = conv.open_session()
            worst, last = 0.0, time.monotonic()
            for i in range(1000):
                await a.send_message(wire.Data(0, i.to_bytes(4, "big")))
                assert await a.next_message() == wire.Data(0, i.to_bytes(4, "big"))
                now = time.monotonic()
                worst, last = max(worst, now - last), now
            assert worst < 0.1
            assert server_b.queued == server_b.queue_limit


async def test_datagrams_round_trip(certs, store):
    async with running_server(certs, store, echo) as srv:
        async with await connect(srv, certs) as conv:
            ch = conv.open_udp("127.0.0.1", 9)
            for i in range(50):
                assert ch.send_datagram(b"%d" % i)
            got = {await asyncio.wait_for(ch.recv_datagram(), 5) for _ in range(50)}
            assert got == {b"%d" % i for i in range(50)}
            assert not ch.send_datagram(bytes(65000))
            assert conv.oversized_datagrams == 1


async def test_route_datagram_counts_unknown_and_malformed(certs, store):
    async with running_server(certs, store, echo) as srv:
        async with await connect(srv, certs) as conv:
            ch = conv.open_udp("127.0.0.1", 9)
            assert conv.route_datagram(wire.encode_udp_frame(wire.UdpFrame(ch.datagram_id, b"payload")))
            assert await ch.recv_datagram() == b"payload"
            assert not conv.route_datagram(wire.encode_udp_frame(wire.UdpFrame(ch.datagram_id + 7, b"x")))
            assert conv.unknown_datagrams == 1
            assert not conv.route_datagram(b"")
            assert not conv.route_datagram(b"\xc0")
            assert conv.malformed_datagrams == 2

            rng = random.Random(5)
            delivered = 0
            for _ in range(10_000):
                frame = rng.randbytes(rng.randint(0, 24))
                delivered += conv.route_datagram(frame)
            assert delivered + conv.unknown_datagrams + conv.malformed_datagrams == 10_000 + 3
            ch.abort()


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_route_datagram_never_raises(data):
    from quicshell.session.conversation import Conversation

    class Stub:
        pass

    async def run():
        conv = Conversation(Stub(), "client", None, "u", 0)
        before = conv.dropped
        ok = conv.route_datagram(data)
        assert ok is False and conv.dropped == before + 1

    asyncio.run(run())


async def test_connection_close_fails_channels(certs, store):
    async def hold(conv, ch):
        await asyncio.sleep(3600)

    async with running_server(certs, store, hold) as srv:
        conv = await connect(srv, certs)
        ch = conv.open_session()
        ch.write(wire.ShellRequest())
        await asyncio.sleep(0.05)
        srv.close()
        with pytest.raises(ChannelClosed):
            await asyncio.wait_for(ch.next_message(), 5)
        await asyncio.wait_for(conv.wait_closed(), 5)

