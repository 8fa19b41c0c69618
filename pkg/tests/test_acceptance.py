"""Acceptance checks, one test (or test group) per criterion.

Each test carries ``@pytest.mark.criterion(n, title)``; the conftest hook
prints a PASS/FAIL line per criterion after the run.
"""

import asyncio
import base64
import hashlib
import json
import os
import random
import time

import jwt
import pytest
from cryptography.hazmat.primitives.asymmetric import rsa
from jwt.algorithms import RSAAlgorithm

from quicshell import wire
from quicshell.auth import (
    Authenticator, OidcToken, Password, PrivateKey, ProviderKeyCache, Reason, parse_jwks, pubkey_text,
)
from quicshell.bench import measure_echo_latency, measure_forward_throughput, measure_session_completion
from quicshell.forward import ForwardingSpec, client_forward_tcp
from quicshell.service import channel_dispatcher
from quicshell.session import AuthenticationError, PathNotFound, Server
from quicshell.session import client as session_client
from quicshell.wire import (
    ChannelPreamble, Data, ExecRequest, ExitSignal, ExitStatus, PtyRequest, ShellRequest, UdpFrame,
    WindowChange,
)

from .conftest import OIDC_ISSUER, PASSWORD, URL_PATH
from .loopback import connect, running_server
from .test_forward import free_port, tcp_echo_server, udp_client, udp_setup
from .test_process import LISTING, local_run, run_remote
from .test_session import echo
from .test_wire import decode_everything

RTT = 100.0
RUNS = 50


# -- 1. codec soundness -----------------------------------------------------------------

def rand_varint(rng):
    bits = rng.choice((6, 14, 30, 62))
    return rng.randrange(1 << bits)


def rand_text(rng, lo=0, hi=40):
    alphabet = rng.choice(("ascii", "bmp", "astral"))
    top = {"ascii": 0x7F, "bmp": 0xD7FF, "astral": 0x10FFFF}[alphabet]
    out = []
    for _ in range(rng.randint(lo, hi)):
        c = rng.randint(0x20, top)
        out.append(chr(c if not 0xD800 <= c <= 0xDFFF else 0x41))
    return "".join(out)


def rand_port(rng):
    return rng.randint(1, 65535)


GENERATORS = {
    "PtyRequest": lambda r: PtyRequest(rand_text(r), rand_varint(r), rand_varint(r)),
    "ShellRequest": lambda r: ShellRequest(),
    "ExecRequest": lambda r: ExecRequest(rand_text(r, 0, 200)),
    "WindowChange": lambda r: WindowChange(rand_varint(r), rand_varint(r)),
    "Data": lambda r: Data(r.randint(0, 2), r.randbytes(r.choice((0, 1, 64, r.randint(0, 4096))))),
    "ExitStatus": lambda r: ExitStatus(rand_varint(r)),
    "ExitSignal": lambda r: ExitSignal(rand_text(r, 1, 10), r.random() < 0.5, rand_text(r)),
}

PREAMBLES = {
    "session": lambda r: ChannelPreamble.session(),
    "direct-tcp": lambda r: ChannelPreamble.tcp(rand_text(r, 1, 60), rand_port(r)),
    "direct-udp": lambda r: ChannelPreamble.udp(rand_text(r, 1, 60), rand_port(r), rand_varint(r)),
}

ROUND_TRIPS = 10_000
FUZZ_BUFFERS = 1_000_000


def _valid_encodings(rng):
    for gen in GENERATORS.values():
        yield wire.encode_frame(gen(rng))
    for gen in PREAMBLES.values():
        yield wire.encode_preamble(gen(rng))
    yield wire.encode_udp_frame(UdpFrame(rand_varint(rng), rng.randbytes(rng.randint(0, 64))))


def _mutate(rng, buf):
    buf = bytearray(buf)
    for _ in range(rng.randint(1, 4)):
        op = rng.randrange(4)
        if op == 0 and buf:
            buf[rng.randrange(len(buf))] ^= 1 << rng.randrange(8)
        elif op == 1 and buf:
            del buf[rng.randrange(len(buf)):]
        elif op == 2:
            buf[rng.randint(0, len(buf)):rng.randint(0, len(buf))] = rng.randbytes(rng.randint(1, 8))
        else:
            buf[rng.randint(0, len(buf)):0] = bytes([rng.choice((0x00, 0x3F, 0x40, 0x7F, 0x80, 0xC0, 0xFF))])
    return bytes(buf)


@pytest.mark.criterion(1, "codec soundness")
class TestCodecSoundness:
    @pytest.mark.parametrize("name", sorted(GENERATORS))
    def test_message_round_trips(self, name, record_property):
        rng = random.Random(f"message-{name}")
        gen = GENERATORS[name]
        for _ in range(ROUND_TRIPS):
            msg = gen(rng)
            body = wire.encode_message(msg)
            assert wire.decode_message(body) == (msg, len(body))
            frame = wire.encode_frame(msg)
            assert wire.decode_frame(frame) == (msg, len(frame))
        record_property(f"{name}_round_trips", ROUND_TRIPS)

    @pytest.mark.parametrize("kind", sorted(PREAMBLES))
    def test_preamble_round_trips(self, kind, record_property):
        rng = random.Random(f"preamble-{kind}")
        for _ in range(ROUND_TRIPS):
            p = PREAMBLES[kind](rng)
            enc = wire.encode_preamble(p)
            assert wire.decode_preamble(enc) == (p, len(enc))
        record_property(f"{kind}_round_trips", ROUND_TRIPS)

    def test_varint_and_udp_frame_round_trips(self, record_property):
        rng = random.Random("scalars")
        for _ in range(ROUND_TRIPS):
            v = rand_varint(rng)
            enc = wire.encode_varint(v)
            assert wire.decode_varint(enc) == (v, len(enc))
            f = UdpFrame(rand_varint(rng), rng.randbytes(rng.randint(0, 1200)))
            assert wire.decode_udp_frame(wire.encode_udp_frame(f)) == f
        record_property("varint_round_trips", ROUND_TRIPS)
        record_property("udp_frame_round_trips", ROUND_TRIPS)

    def test_million_fuzz_buffers(self, record_property):
        rng = random.Random(20240601)
        seeds = [buf for _ in range(200) for buf in _valid_encodings(rng)]
        start = time.monotonic()
        for i in range(FUZZ_BUFFERS):
            if i % 2:
                buf = rng.randbytes(rng.randint(0, 48))
            else:
                buf = _mutate(rng, rng.choice(seeds))
            decode_everything(buf)  # anything but a codec error fails the test
        elapsed = time.monotonic() - start
        record_property("fuzz_buffers", FUZZ_BUFFERS)
        record_property("fuzz_seconds", round(elapsed, 1))
        assert elapsed < 60


# -- 2. auth matrix ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def idp_key():
    return rsa.generate_private_key(public_exponent=65537, key_size=2048)


@pytest.fixture(scope="module")
def rogue_key():
    return rsa.generate_private_key(public_exponent=65537, key_size=2048)


def b64url(raw):
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode()


def unb64url(seg):
    return base64.urlsafe_b64decode(seg + "=" * (-len(seg) % 4))


def id_token(key, **over):
    now = int(time.time())
    claims = {"iss": OIDC_ISSUER, "aud": "quicshell", "sub": "42", "email": "bob@example.test",
              "iat": now - 5, "exp": now + 600}
    claims.update(over)
    return jwt.encode(claims, key, algorithm="RS256", headers={"kid": "k1"})


def edit_payload(token, **changes):
    """Change claims but keep the original signature."""
    h, p, s = token.split(".")
    claims = json.loads(unb64url(p))
    claims.update(changes)
    return ".".join((h, b64url(json.dumps(claims).encode()), s))


def flip_basic(header):
    raw = bytearray(base64.b64decode(header.split(" ", 1)[1]))
    raw[-1] ^= 0x01
    return "Basic " + base64.b64encode(bytes(raw)).decode()


def rewrite_header(monkeypatch, fn):
    original = session_client.build_authorization_header
    monkeypatch.setattr(session_client, "build_authorization_header",
                        lambda cred, sid=None, now=None: fn(original(cred, sid, now)))


@pytest.fixture
async def auth_server(certs, store, idp_key):
    jwk = json.loads(RSAAlgorithm.to_jwk(idp_key.public_key()))
    jwk.update(kid="k1", alg="RS256", use="sig")
    cache = ProviderKeyCache()
    cache.put(OIDC_ISSUER, parse_jwks({"keys": [jwk]}))
    cert, key, _ = certs
    srv = Server(url_path=URL_PATH, certfile=cert, keyfile=key,
                 authenticator=Authenticator(store, key_cache=cache, oidc_audience="quicshell"))
    await srv.start()
    try:
        yield srv
    finally:
        srv.close()


def _resign(other_key, ed_key):
    def fn(header):
        claims = jwt.decode(header.split(" ", 1)[1], options={"verify_signature": False})
        claims["pubkey"] = pubkey_text(ed_key.public_key())
        return "Bearer " + jwt.encode(claims, other_key, algorithm="EdDSA")
    return fn


# (scheme, case) -> (username, credential factory, header rewrite, expected status)
def matrix(ed_key, other_key, idp_key, rogue_key):
    pw = lambda u, p=PASSWORD: (lambda: Password(u, p))  # noqa: E731
    pk = lambda k: (lambda: PrivateKey("alice", k))  # noqa: E731
    oi = lambda key, **over: (lambda: OidcToken(id_token(key, **over)))  # noqa: E731
    return {
        ("password", "valid"): ("alice", pw("alice"), None, 200),
        ("password", "wrong-secret"): ("alice", pw("alice", "nope"), None, 401),
        ("password", "expired"): ("alice", pw("bob"), None, 401),  # Basic has no expiry
        ("password", "tampered"): ("alice", pw("alice"), flip_basic, 401),
        ("password", "unauthorized-identity"): ("bob", pw("bob"), None, 401),
        ("pubkey", "valid"): ("alice", pk(ed_key), None, 200),
        ("pubkey", "wrong-secret"): ("alice", pk(other_key), _resign(other_key, ed_key), 401),
        ("pubkey", "expired"): ("alice", pk(ed_key), "expired", 401),
        ("pubkey", "tampered"): ("alice", pk(ed_key),
                                 lambda h: "Bearer " + edit_payload(h.split(" ", 1)[1], exp=2**31), 401),
        ("pubkey", "unauthorized-identity"): ("alice", pk(other_key), None, 401),
        ("oidc", "valid"): ("bob", oi(idp_key), None, 200),
        ("oidc", "wrong-secret"): ("bob", oi(rogue_key), None, 401),
        ("oidc", "expired"): ("bob", oi(idp_key, iat=int(time.time()) - 7200, exp=int(time.time()) - 3600),
                              None, 401),
        ("oidc", "tampered"): ("bob", oi(idp_key),
                               lambda h: "Bearer " + edit_payload(h.split(" ", 1)[1], email="root@example.test"),
                               401),
        ("oidc", "unauthorized-identity"): ("bob", oi(idp_key, email="eve@example.test"), None, 401),
    }


CASES = [(s, c) for s in ("password", "pubkey", "oidc")
         for c in ("valid", "wrong-secret", "expired", "tampered", "unauthorized-identity")]


@pytest.mark.criterion(2, "auth matrix")
async def test_auth_matrix(auth_server, certs, ed_key, other_key, idp_key, rogue_key, monkeypatch, record_property):
    table = matrix(ed_key, other_key, idp_key, rogue_key)
    assert len(table) == 15 == len(CASES)
    start = time.monotonic()
    outcomes = {}
    for scheme, case in CASES:
        username, credential, rewrite, expected = table[scheme, case]
        with monkeypatch.context() as mp:
            kw = {}
            if rewrite == "expired":
                kw["clock"] = lambda: time.time() - 3600
            elif rewrite is not None:
                rewrite_header(mp, rewrite)
            try:
                conv = await connect(auth_server, certs, username=username, credential=credential(), **kw)
            except AuthenticationError as exc:
                status, schemes = 401, exc.schemes
            else:
                status, schemes = 200, ()
                await conv.aclose()
        reason = auth_server.decisions[-1].reason
        outcomes[scheme, case] = status
        assert status == expected, f"{scheme}/{case}: got {status} ({reason})"
        if status == 401:
            assert schemes, f"{scheme}/{case}: 401 without WWW-Authenticate"
    elapsed = time.monotonic() - start
    record_property("cases", len(outcomes))
    record_property("seconds", round(elapsed, 1))
    assert elapsed < 30


@pytest.mark.criterion(2, "auth matrix")
async def test_auth_matrix_rejection_reasons(auth_server, certs, ed_key, other_key, idp_key, rogue_key,
                                             monkeypatch):
    # The status alone could hide a rejection for the wrong reason.
    expected = {
        ("password", "wrong-secret"): Reason.WRONG_PASSWORD,
        ("password", "expired"): Reason.USERNAME_MISMATCH,
        ("pubkey", "wrong-secret"): Reason.BAD_SIGNATURE,
        ("pubkey", "expired"): Reason.EXPIRED,
        ("pubkey", "tampered"): Reason.BAD_SIGNATURE,
        ("pubkey", "unauthorized-identity"): Reason.KEY_NOT_AUTHORIZED,
        ("oidc", "wrong-secret"): Reason.BAD_SIGNATURE,
        ("oidc", "expired"): Reason.EXPIRED,
        ("oidc", "tampered"): Reason.BAD_SIGNATURE,
        ("oidc", "unauthorized-identity"): Reason.IDENTITY_NOT_AUTHORIZED,
    }
    table = matrix(ed_key, other_key, idp_key, rogue_key)
    for (scheme, case), reason in expected.items():
        username, credential, rewrite, _ = table[scheme, case]
        with monkeypatch.context() as mp:
            kw = {}
            if rewrite == "expired":
                kw["clock"] = lambda: time.time() - 3600
            elif rewrite is not None:
                rewrite_header(mp, rewrite)
            with pytest.raises(AuthenticationError):
                await connect(auth_server, certs, username=username, credential=credential(), **kw)
        assert auth_server.decisions[-1].reason == reason, (scheme, case)


# -- 3. replay ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "replay protection")
async def test_token_from_one_conversation_rejected_on_another(certs, store, ed_key, monkeypatch, record_property):
    captured = []

    def capture(header):
        captured.append(header)
        return header

    async with running_server(certs, store, echo) as srv:
        with monkeypatch.context() as mp:
            rewrite_header(mp, capture)
            a = await connect(srv, certs, credential=PrivateKey("alice", ed_key))
        assert srv.decisions[-1].accepted
        with monkeypatch.context() as mp:
            rewrite_header(mp, lambda header: captured[0])
            with pytest.raises(AuthenticationError) as info:
                await connect(srv, certs, credential=PrivateKey("alice", ed_key))
        await a.aclose()
    reason = srv.decisions[-1].reason
    record_property("reason", reason)
    assert reason == Reason.SESSION_MISMATCH
    assert "Bearer" in info.value.schemes


# -- 4 and 5. establishment cost ---------------------------------------------------------------

@pytest.mark.criterion(4, "establishment cost")
async def test_trivial_session_cost_at_rtt_100(record_property):
    report = await measure_session_completion("trivial", RUNS, RTT)
    record_property("round_trips", report.rtt_count)
    record_property("mean_ms", round(report.mean, 1))
    assert report.n == RUNS
    assert report.rtt_count <= 4
    assert report.mean <= 4 * RTT + 150


@pytest.mark.criterion(5, "output-size insensitivity")
async def test_output_size_barely_matters(record_property):
    small = await measure_session_completion("small", RUNS, RTT)
    large = await measure_session_completion("large", RUNS, RTT)
    diff = abs(large.mean - small.mean)
    record_property("small_mean_ms", round(small.mean, 1))
    record_property("large_mean_ms", round(large.mean, 1))
    assert small.n == large.n == RUNS
    assert diff < RTT


# -- 6. exec fidelity -----------------------------------------------------------------------------

@pytest.fixture
async def shell_conv(certs, store):
    async with running_server(certs, store, channel_dispatcher()) as srv:
        conv = await connect(srv, certs)
        yield conv
        await conv.aclose()


@pytest.mark.criterion(6, "exec fidelity")
async def test_exit_status_maps_through(shell_conv):
    assert local_run("exit 42").returncode == 42
    _, _, term = await run_remote(shell_conv, "exit 42")
    assert term == ExitStatus(42)


@pytest.mark.criterion(6, "exec fidelity")
async def test_listing_is_byte_identical(shell_conv, record_property):
    local = local_run(LISTING).stdout
    out, _, term = await run_remote(shell_conv, LISTING)
    record_property("listing_bytes", len(out))
    assert len(local) == 131072
    assert out == local and term == ExitStatus(0)


# -- 7. forwarding fidelity -----------------------------------------------------------------------

@pytest.mark.criterion(7, "forwarding fidelity")
async def test_tcp_10mb_both_directions(shell_conv):
    echo_srv = await tcp_echo_server()
    target = echo_srv.sockets[0].getsockname()[1]
    fwd = await client_forward_tcp(shell_conv, ForwardingSpec("tcp", "127.0.0.1", free_port(), "127.0.0.1", target))
    payload = os.urandom(10 * 1024 * 1024)
    reader, writer = await asyncio.open_connection(*fwd.address)

    async def send():
        for i in range(0, len(payload), 256 * 1024):
            writer.write(payload[i:i + 256 * 1024])
            await writer.drain()
        writer.write_eof()

    sender = asyncio.ensure_future(send())
    received = await asyncio.wait_for(reader.read(), 60)
    await sender
    writer.close()
    fwd.close()
    echo_srv.close()
    # The echo server returns what crossed the tunnel, so this covers both directions.
    assert hashlib.sha256(received).digest() == hashlib.sha256(payload).digest()


@pytest.mark.criterion(7, "forwarding fidelity")
async def test_udp_1000_datagrams(shell_conv, record_property):
    echo_t, _, fwd = await udp_setup(shell_conv)
    transport, client = await udp_client(fwd.address)
    rng = random.Random(7)
    sent = {}
    for i in range(1000):
        payload = i.to_bytes(4, "big") + rng.randbytes(rng.randint(0, 1196))
        sent[i] = payload
        transport.sendto(payload)
        if i % 50 == 49:
            await asyncio.sleep(0.005)
    got = {}
    try:
        while len(got) < 1000:
            data = await asyncio.wait_for(client.got.get(), 5)
            got[int.from_bytes(data[:4], "big")] = data
    finally:
        transport.close()
        fwd.close()
        echo_t.close()
    record_property("delivered", len(got))
    assert got == sent


# -- 8. throughput floor ------------------------------------------------------------------------

@pytest.mark.criterion(8, "throughput floor")
async def test_tcp_goodput_floor(record_property):
    report = await measure_forward_throughput("tcp", 5.0)
    record_property("tcp_mbps", round(report.samples[0], 1))
    assert report.samples[0] >= 100


@pytest.mark.criterion(8, "throughput floor")
async def test_udp_goodput_floor(record_property):
    report = await measure_forward_throughput("udp", 5.0)
    record_property("udp_mbps", round(report.samples[0], 1))
    record_property("udp_delivery", report.notes.get("delivery_ratio"))
    assert report.samples[0] >= 50


# -- 9. channel isolation --------------------------------------------------------------------------

@pytest.mark.criterion(9, "channel isolation")
async def test_paused_channel_does_not_stall_others(certs, store, record_property):
    paused = asyncio.Event()

    async def handler(conv, ch):
        if ch.preamble.channel_type == wire.SESSION and not paused.is_set():
            paused.set()
            await asyncio.sleep(3600)
        await echo(conv, ch)

    async with running_server(certs, store, handler) as srv:
        async with await connect(srv, certs) as conv:
            blocked = conv.open_session()
            for _ in range(400):
                blocked.write(Data(0, bytes(1024)))
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
                await a.send_message(Data(0, i.to_bytes(4, "big")))
                assert await a.next_message() == Data(0, i.to_bytes(4, "big"))
                now = time.monotonic()
                worst, last = max(worst, now - last), now
            still_full = server_b.queued == server_b.queue_limit
    record_property("worst_gap_ms", round(worst * 1000, 1))
    assert still_full
    assert worst <= 0.1


# -- 10. scanning defense ------------------------------------------------------------------------

@pytest.mark.criterion(10, "scanning defense")
async def test_unknown_paths_are_404_without_auth(certs, store, record_property):
    paths = ["/", "/ssh3", URL_PATH + "/", URL_PATH.upper(), "/.well-known/ssh3", URL_PATH + "x", "/admin"]
    async with running_server(certs, store, echo) as srv:
        for path in paths:
            with pytest.raises(PathNotFound):
                await connect(srv, certs, path=path)
        record_property("auth_calls", srv.authenticator.calls)
        assert srv.authenticator.calls == 0
        assert srv.path_rejections == len(paths)


# -- 11. echo latency ---------------------------------------------------------------------------

@pytest.mark.criterion(11, "echo latency")
async def test_keystroke_echo_at_rtt_100(record_property):
    report = await measure_echo_latency(200, RTT)
    record_property("median_ms", round(report.median, 1))
    assert report.n == 200
    assert RTT <= report.median <= RTT + 30
