# # A loopback conversation
#
# Start a server on 127.0.0.1 with a throwaway certificate and an Ed25519
# key, log in with that key, run a command and forward a TCP port.

# %%
import asyncio
import socket
import tempfile
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric import ed25519

from quicshell import wire
from quicshell.auth import Authenticator, IdentityStore, PrivateKey, pubkey_text
from quicshell.auth.store import parse_pubkey_line
from quicshell.forward import ForwardingSpec, client_forward_tcp
from quicshell.service import channel_dispatcher
from quicshell.session import Server, Trust, client_open_conversation
from quicshell.tlsutil import generate_self_signed

workdir = Path(tempfile.mkdtemp())
pin = generate_self_signed(workdir / "cert.pem", workdir / "key.pem")
key = ed25519.Ed25519PrivateKey.generate()
store = IdentityStore({"demo": [parse_pubkey_line(pubkey_text(key.public_key()))]})
print("certificate pin:", pin)


# %% [markdown]
# The server answers only on its secret path; anything else gets a 404
# before authentication is even considered.

# %%
async def run_command(conv, command):
    ch = conv.open_session()
    ch.write(wire.ExecRequest(command))
    ch.close()
    out = bytearray()
    status = None
    async for msg in ch:
        if isinstance(msg, wire.Data):
            out += msg.payload
        elif isinstance(msg, (wire.ExitStatus, wire.ExitSignal)):
            status = msg
    return out.decode(), status


async def main():
    server = Server(url_path="/my-secret-path", authenticator=Authenticator(store, ("pubkey",)),
                    certfile=str(workdir / "cert.pem"), keyfile=str(workdir / "key.pem"),
                    handler=channel_dispatcher())
    await server.start()
    host, port = server.address
    try:
        conv = await client_open_conversation(host, port, "/my-secret-path", "demo", PrivateKey("demo", key),
                                              trust=Trust(pin=pin), server_name="localhost")
        print("conversation id:", conv.conversation_id.b64())
        out, status = await run_command(conv, "echo hello from $(hostname); exit 3")
        print(out.strip(), status)

        # A tiny TCP service reached through the tunnel.
        async def greet(reader, writer):
            writer.write(b"hi " + await reader.readline())
            await writer.drain()
            writer.close()

        target = await asyncio.start_server(greet, "127.0.0.1", 0)
        tport = target.sockets[0].getsockname()[1]
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            local = s.getsockname()[1]
        fwd = await client_forward_tcp(conv, ForwardingSpec("tcp", "127.0.0.1", local, "127.0.0.1", tport))
        reader, writer = await asyncio.open_connection(*fwd.address)
        writer.write(b"tunnel\n")
        print((await reader.read()).decode().strip())
        writer.close()
        fwd.close()
        target.close()
        await conv.aclose()
    finally:
        server.close()


asyncio.run(main())
