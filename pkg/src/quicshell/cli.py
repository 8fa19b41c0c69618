"""Command-line client and server daemon."""

from __future__ import annotations

import argparse
import asyncio
import atexit
import contextlib
import fcntl
import getpass
import logging
import os
import signal
import struct
import sys
import termios
import threading
import tty
from dataclasses import dataclass, field
from typing import Optional
from urllib.parse import unquote, urlsplit

from . import __version__, wire
from .auth import Authenticator, OidcToken, Password, PrivateKey, hash_password
from .auth.credentials import load_private_key
from .auth.store import StoreError, load_identity_store
from .config import ConfigError, load_server_config
from .forward import ForwardingSpec, client_forward
from .service import channel_dispatcher
from .session import (
    AuthenticationError, ChannelClosed, Server, SessionError, TransportOptions, Trust, client_open_conversation,
)
from .tlsutil import generate_self_signed

log = logging.getLogger("quicshell")

CLIENT_FAILURE = 255
DEFAULT_PORT = 443


class UsageError(Exception):
    pass


# -- client invocation -----------------------------------------------------------

@dataclass
class Destination:
    host: str
    port: int
    path: str
    username: Optional[str] = None


def parse_destination(text: str) -> Destination:
    """``https://[user@]host[:port]/path`` or the shorthand ``user@host[:port]/path``."""
    if "://" not in text:
        text = "https://" + text
    parts = urlsplit(text)
    if parts.scheme != "https":
        raise UsageError(f"destination must use https://, got {parts.scheme}://")
    if not parts.hostname:
        raise UsageError(f"destination has no host: {text}")
    try:
        port = parts.port or DEFAULT_PORT
    except ValueError as exc:
        raise UsageError(f"bad port in destination: {exc}") from None
    if parts.query or parts.fragment:
        raise UsageError("destination must not carry a query or fragment")
    user = unquote(parts.username) if parts.username else None
    return Destination(parts.hostname, port, parts.path or "/", user)


@dataclass
class ClientInvocation:
    destination: Destination
    username: str
    credential: object
    trust: Trust
    forwards: list = field(default_factory=list)
    command: Optional[str] = None
    pty: bool = True
    session: bool = True


def resolve_credential(args, username: str, env=None):
    """Pick exactly one credential source.

    Identity file, bearer token and password are mutually exclusive when
    given as flags. Tokens are looked up flag first, then QUICSHELL_TOKEN,
    then --token-file.
    """
    env = os.environ if env is None else env
    explicit = [name for name, value in (("-i", args.identity), ("--token", args.token),
                                         ("--token-file", args.token_file), ("--password", args.password))
                if value is not None]
    if len(explicit) > 1 and not (set(explicit) <= {"--token", "--token-file"}):
        raise UsageError(f"choose one credential source, not {' and '.join(explicit)}")
    if args.identity is not None:
        passphrase = env.get("QUICSHELL_KEY_PASSPHRASE")
        try:
            key = load_private_key(args.identity, passphrase.encode() if passphrase else None)
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot load identity file {args.identity}: {exc}") from None
        return PrivateKey(username, key)
    token = args.token or env.get("QUICSHELL_TOKEN")
    if token is None and args.token_file is not None:
        try:
            with open(args.token_file, encoding="utf-8") as fh:
                token = fh.read().strip()
        except OSError as exc:
            raise UsageError(f"cannot read token file {args.token_file}: {exc.strerror}") from None
    if token and args.password is None:
        return OidcToken(token.strip())
    password = args.password if args.password is not None else env.get("QUICSHELL_PASSWORD")
    if password is None:
        if not sys.stdin.isatty():
            raise UsageError("no credential: use -i, --token/QUICSHELL_TOKEN or a terminal for the password")
        password = getpass.getpass(f"{username}'s password: ")
    return Password(username, password)


def client_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quicshell", description="Remote shell over HTTP/3.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("destination", help="https://[user@]host[:port]/secret-path or user@host[:port]/path")
    common.add_argument("-l", "--login", dest="login", help="remote username")
    common.add_argument("-i", "--identity", help="private key file (OpenSSH or PEM)")
    common.add_argument("--token", help="OIDC ID token (JWT)")
    common.add_argument("--token-file", help="file holding the OIDC ID token")
    common.add_argument("--password", help=argparse.SUPPRESS)
    common.add_argument("--cafile", help="CA bundle or self-signed certificate to trust")
    common.add_argument("--insecure-pin", metavar="SHA256", help="accept only the certificate with this fingerprint")
    common.add_argument("-L", "--forward", action="append", default=[], metavar="SPEC",
                        help="tcp/<bind>:<port>/<host>:<port> or udp/...")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="mode", required=True)
    shell = sub.add_parser("shell", parents=[common], help="interactive shell (default pty)")
    shell.add_argument("-T", dest="pty", action="store_false", help="no pseudo-terminal")
    ex = sub.add_parser("exec", parents=[common], help="run one command")
    ex.add_argument("-t", dest="pty", action="store_true", help="allocate a pseudo-terminal")
    ex.add_argument("command", nargs=argparse.REMAINDER)
    fwd = sub.add_parser("forward", parents=[common], help="only forward ports (-L), no session")
    fwd.set_defaults(pty=False)
    return p


def build_invocation(args, env=None) -> ClientInvocation:
    env = os.environ if env is None else env
    dest = parse_destination(args.destination)
    username = args.login or dest.username or env.get("USER") or getpass.getuser()
    forwards = []
    for spec in args.forward:
        try:
            forwards.append(ForwardingSpec.parse(spec))
        except ValueError as exc:
            raise UsageError(f"bad -L {spec!r}: {exc}") from None
    command = None
    if args.mode == "exec":
        if not args.command:
            raise UsageError("exec needs a command")
        command = " ".join(args.command)
    if args.mode == "forward" and not forwards:
        raise UsageError("forward needs at least one -L")
    trust = Trust(cafile=args.cafile, pin=args.insecure_pin)
    credential = resolve_credential(args, username, env)
    return ClientInvocation(dest, username, credential, trust, forwards, command,
                            pty=args.pty, session=args.mode != "forward")


# -- terminal handling -------------------------------------------------------------

def terminal_size(fd: int = 1) -> tuple[int, int]:
    try:
        rows, cols, _, _ = struct.unpack("HHHH", fcntl.ioctl(fd, termios.TIOCGWINSZ, b"\0" * 8))
    except OSError:
        return 80, 24
    return (cols or 80), (rows or 24)


class RawTerminal:
    """Puts a tty in raw mode and guarantees the saved state comes back."""

    def __init__(self, fd: int):
        self.fd = fd
        self.saved = None

    def __enter__(self):
        if os.isatty(self.fd):
            self.saved = termios.tcgetattr(self.fd)
            atexit.register(self.restore)
            tty.setraw(self.fd, termios.TCSANOW)
        return self

    def die(self, signum: int) -> None:
        """Fatal signal while raw: put the terminal back, then die of it."""
        self.restore()
        signal.signal(signum, signal.SIG_DFL)
        os.kill(os.getpid(), signum)

    def restore(self) -> None:
        if self.saved is not None:
            with contextlib.suppress(termios.error):
                termios.tcsetattr(self.fd, termios.TCSADRAIN, self.saved)
            self.saved = None

    def __exit__(self, *exc):
        self.restore()


def _threaded_reader(loop, fd: int, queue: asyncio.Queue) -> None:
    def run():
        while True:
            try:
                data = os.read(fd, 65536)
            except OSError:
                data = b""
            loop.call_soon_threadsafe(queue.put_nowait, data)
            if not data:
                return

    threading.Thread(target=run, daemon=True, name="stdin").start()


def _write_all(fd: int, data: bytes) -> None:
    view = memoryview(data)
    while view:
        try:
            n = os.write(fd, view)
        except BlockingIOError:
            continue
        view = view[n:]


async def run_session(conv, invocation: ClientInvocation, stdin: int = 0, stdout: int = 1, stderr: int = 2) -> int:
    """Drive one session channel; returns the local exit code."""
    loop = asyncio.get_running_loop()
    ch = conv.open_session()
    interactive = invocation.pty and os.isatty(stdin)
    if invocation.pty:
        cols, rows = terminal_size(stdout if os.isatty(stdout) else stdin)
        ch.write(wire.PtyRequest(os.environ.get("TERM", "xterm"), cols, rows))
    ch.write(wire.ExecRequest(invocation.command) if invocation.command is not None else wire.ShellRequest())

    inbox: asyncio.Queue = asyncio.Queue()
    raw = RawTerminal(stdin) if interactive else contextlib.nullcontext()
    resize_installed = False
    with raw:
        if interactive:
            loop.add_reader(stdin, lambda: inbox.put_nowait(_read_or_eof(stdin)))
            for sig in (signal.SIGTERM, signal.SIGHUP):
                loop.add_signal_handler(sig, raw.die, sig)
            with contextlib.suppress(NotImplementedError, RuntimeError):
                loop.add_signal_handler(signal.SIGWINCH,
                                        lambda: ch.error or ch.write(wire.WindowChange(*terminal_size(stdin))))
                resize_installed = True
        else:
            _threaded_reader(loop, stdin, inbox)

        async def pump_stdin():
            while True:
                data = await inbox.get()
                if not data:
                    if not invocation.pty:
                        ch.close()
                    return
                await ch.send_message(wire.Data(wire.DataKind.STDIN, data))

        feeder = asyncio.ensure_future(pump_stdin())
        status = CLIENT_FAILURE
        try:
            async for msg in ch:
                if isinstance(msg, wire.Data):
                    _write_all(stderr if msg.kind == wire.DataKind.STDERR else stdout, msg.payload)
                elif isinstance(msg, wire.ExitStatus):
                    status = msg.code & 0xFF if msg.code >= 0 else CLIENT_FAILURE
                elif isinstance(msg, wire.ExitSignal):
                    status = 128 + _signal_number(msg.signal_name)
                    if msg.error_message:
                        _write_all(stderr, f"quicshell: {msg.error_message}\n".encode())
        except ChannelClosed as exc:
            _write_all(stderr, f"\r\nquicshell: {exc}\r\n".encode())
            status = CLIENT_FAILURE
        finally:
            feeder.cancel()
            if interactive:
                loop.remove_reader(stdin)
                for sig in (signal.SIGTERM, signal.SIGHUP):
                    loop.remove_signal_handler(sig)
            if resize_installed:
                loop.remove_signal_handler(signal.SIGWINCH)
    return status


def _read_or_eof(fd: int) -> bytes:
    try:
        return os.read(fd, 65536)
    except OSError:
        return b""


def _signal_number(name: str) -> int:
    try:
        return int(signal.Signals["SIG" + name])
    except KeyError:
        return 0


async def run_client(invocation: ClientInvocation, options: Optional[TransportOptions] = None) -> int:
    dest = invocation.destination
    try:
        conv = await client_open_conversation(dest.host, dest.port, dest.path, invocation.username,
                                              invocation.credential, trust=invocation.trust, options=options)
    except AuthenticationError as exc:
        schemes = ", ".join(exc.schemes) or "none"
        print(f"quicshell: authentication failed for {invocation.username}; server accepts: {schemes}",
              file=sys.stderr)
        return CLIENT_FAILURE
    except SessionError as exc:
        print(f"quicshell: {exc}", file=sys.stderr)
        return CLIENT_FAILURE
    except OSError as exc:
        print(f"quicshell: cannot connect to {dest.host}:{dest.port}: {exc}", file=sys.stderr)
        return CLIENT_FAILURE

    forwarders = []
    try:
        for spec in invocation.forwards:
            try:
                forwarders.append(await client_forward(conv, spec))
            except (OSError, SessionError) as exc:
                print(f"quicshell: cannot forward {spec}: {exc}", file=sys.stderr)
                return CLIENT_FAILURE
        if invocation.session:
            return await run_session(conv, invocation)
        await conv.wait_closed()
        print(f"quicshell: connection closed: {conv.close_reason}", file=sys.stderr)
        return CLIENT_FAILURE
    finally:
        for f in forwarders:
            f.close()
        await conv.aclose()


def client_main(argv=None) -> int:
    parser = client_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="quicshell: %(levelname)s %(name)s: %(message)s")
    try:
        invocation = build_invocation(args)
    except UsageError as exc:
        print(f"quicshell: {exc}", file=sys.stderr)
        return CLIENT_FAILURE
    try:
        return asyncio.run(run_client(invocation))
    except KeyboardInterrupt:
        return 130


# -- server daemon -----------------------------------------------------------------

def server_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quicshell-server", description="Remote shell server over HTTP/3.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-c", "--config", help="server configuration (TOML)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--hash-password", action="store_true",
                   help="read a password and print an identity-store line for it")
    p.add_argument("--generate-cert", nargs=2, metavar=("CERT", "KEY"),
                   help="write a self-signed certificate and print its fingerprint")
    p.add_argument("--host", action="append", default=[], help="subject name for --generate-cert")
    return p


def build_server(config) -> Server:
    for label, path in (("certificate", config.cert), ("private key", config.key),
                        ("identity store", config.identity_store)):
        if not path.is_file():
            raise ConfigError(f"{label} not found: {path}", config.source)
    try:
        store = load_identity_store(config.identity_store)
    except StoreError as exc:
        raise ConfigError(str(exc), config.identity_store, exc.line) from None
    authenticator = Authenticator(store, config.schemes, oidc_audience=config.oidc_audience)
    options = TransportOptions() if config.initial_window is None else TransportOptions(
        initial_window=config.initial_window)
    try:
        return Server(url_path=config.url_path, authenticator=authenticator, certfile=str(config.cert),
                      keyfile=str(config.key), max_channels=config.max_channels, options=options,
                      handler=channel_dispatcher(privileged=config.privileged, forwarding=config.forwarding))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load TLS material: {exc}", config.source) from None


async def serve(config, ready=None, stop: Optional[asyncio.Event] = None, grace: float = 0.5) -> int:
    server = build_server(config)
    host, port = config.address
    try:
        address = await server.start(host, port)
    except OSError as exc:
        print(f"quicshell-server: cannot listen on {config.listen}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    stop = stop or asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        with contextlib.suppress(NotImplementedError, RuntimeError):
            loop.add_signal_handler(sig, stop.set)
    line = f"quicshell-server ready on udp {address[0]}:{address[1]}"
    print(line, flush=True)
    log.info("%s mode=%s schemes=%s", line, config.mode, ",".join(config.schemes))
    if ready is not None:
        ready(address)
    await stop.wait()
    log.info("shutting down")
    conversations = list(server.conversations)
    server.close()
    tasks = [t for c in conversations for t in c._tasks]
    if tasks:
        _, pending = await asyncio.wait(tasks, timeout=grace)
        for t in pending:
            t.cancel()
        if pending:
            await asyncio.wait(pending, timeout=grace)
    await asyncio.sleep(0.05)
    return 0


def server_main(argv=None) -> int:
    args = server_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose == 0 else logging.DEBUG,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.verbose == 0:
        logging.getLogger("quic").setLevel(logging.WARNING)
    if args.hash_password:
        password = getpass.getpass("password: ") if sys.stdin.isatty() else sys.stdin.readline().rstrip("\n")
        print(hash_password(password).serialize())
        return 0
    if args.generate_cert:
        cert, key = args.generate_cert
        fp = generate_self_signed(cert, key, hosts=tuple(args.host) or ("localhost", "127.0.0.1"))
        print(fp)
        return 0
    if not args.config:
        print("quicshell-server: --config is required", file=sys.stderr)
        return 2
    try:
        config = load_server_config(args.config)
        return asyncio.run(serve(config))
    except ConfigError as exc:
        print(f"quicshell-server: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(client_main())
