"""Server side of session channels: pseudo-terminals, processes and I/O pumping."""

from __future__ import annotations

import asyncio
import errno
import fcntl
import logging
import os
import pwd
import signal
import struct
import termios
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .session.channel import Channel
from .session.errors import ChannelClosed, ChannelError

log = logging.getLogger(__name__)

DEFAULT_PATH = "/usr/local/bin:/usr/bin:/bin"
READ_SIZE = 65536


class ExecError(Exception):
    def __init__(self, message: str, code: ChannelError):
        super().__init__(message)
        self.code = code


class PtyUnsupported(ExecError):
    def __init__(self):
        super().__init__("pseudo-terminals are not available on this platform", ChannelError.SPAWN_FAILED)


class ProtocolViolation(Exception):
    pass


# -- pseudo-terminals ---------------------------------------------------------------

@dataclass
class Pty:
    master: int
    slave: int
    term: str

    def resize(self, cols: int, rows: int) -> None:
        if cols < 1 or rows < 1:
            raise ValueError("terminal size must be at least 1x1")
        fcntl.ioctl(self.master, termios.TIOCSWINSZ, struct.pack("HHHH", rows, cols, 0, 0))

    def size(self) -> tuple[int, int]:
        rows, cols, _, _ = struct.unpack("HHHH", fcntl.ioctl(self.master, termios.TIOCGWINSZ, b"\0" * 8))
        return cols, rows

    def close_slave(self) -> None:
        if self.slave >= 0:
            os.close(self.slave)
            self.slave = -1

    def close(self) -> None:
        self.close_slave()
        if self.master >= 0:
            os.close(self.master)
            self.master = -1


def allocate_pty(term: str, cols: int, rows: int) -> Pty:
    if cols < 1 or rows < 1:
        raise ValueError(f"terminal size must be at least 1x1, got {cols}x{rows}")
    if not hasattr(os, "openpty"):
        raise PtyUnsupported()
    master, slave = os.openpty()
    pty = Pty(master, slave, term or "dumb")
    pty.resize(cols, rows)
    os.set_blocking(master, False)
    return pty


class _PtyIO:
    """Non-blocking reads and writes on a pty master via the event loop."""

    def __init__(self, fd: int):
        self.fd = fd
        self.loop = asyncio.get_running_loop()
        self._out = bytearray()
        self._writing = False
        self.closed = False

    async def read(self) -> bytes:
        while True:
            try:
                return os.read(self.fd, READ_SIZE)
            except BlockingIOError:
                pass
            except OSError as exc:
                if exc.errno == errno.EIO:
                    return b""
                raise
            fut = self.loop.create_future()
            self.loop.add_reader(self.fd, lambda: fut.done() or fut.set_result(None))
            try:
                await fut
            finally:
                self.loop.remove_reader(self.fd)

    def write(self, data: bytes) -> None:
        if self.closed:
            return
        self._out += data
        self._flush()

    def _flush(self) -> None:
        while self._out:
            try:
                n = os.write(self.fd, self._out)
            except BlockingIOError:
                break
            except OSError:
                self._out.clear()
                break
            del self._out[:n]
        if self._out and not self._writing:
            self._writing = True
            self.loop.add_writer(self.fd, self._flush)
        elif not self._out and self._writing:
            self._writing = False
            self.loop.remove_writer(self.fd)

    def close(self) -> None:
        self.closed = True
        if self._writing:
            self.loop.remove_writer(self.fd)
            self._writing = False


# -- processes -------------------------------------------------------------------------

@dataclass
class Account:
    name: str
    uid: int
    gid: int
    home: str
    shell: str


def lookup_account(username: str, privileged: bool) -> Account:
    """The account to run as: ``username`` when privileged, else the server's own."""
    try:
        entry = pwd.getpwnam(username) if privileged else pwd.getpwuid(os.getuid())
    except KeyError:
        raise ExecError(f"no such account: {username}", ChannelError.UNKNOWN_USER) from None
    shell = entry.pw_shell if entry.pw_shell and os.path.exists(entry.pw_shell) else "/bin/sh"
    return Account(entry.pw_name, entry.pw_uid, entry.pw_gid, entry.pw_dir or "/", shell)


def minimal_environment(account: Account, term: Optional[str] = None, extra=None) -> dict:
    env = {
        "HOME": account.home,
        "USER": account.name,
        "LOGNAME": account.name,
        "SHELL": account.shell,
        "PATH": DEFAULT_PATH,
    }
    if term:
        env["TERM"] = term
    env.update(extra or {})
    return env


def _controlling_tty() -> None:
    fcntl.ioctl(0, termios.TIOCSCTTY, 0)


@dataclass
class RemoteProcess:
    process: asyncio.subprocess.Process
    pty: Optional[Pty] = None
    state: str = "running"
    code: Optional[int] = None
    signal_name: Optional[str] = None
    _io: Optional[_PtyIO] = field(default=None, repr=False)

    @property
    def pid(self) -> int:
        return self.process.pid

    async def wait(self) -> int:
        rc = await self.process.wait()
        if rc >= 0:
            self.state, self.code = "exited", rc
        else:
            self.state = "signaled"
            try:
                self.signal_name = signal.Signals(-rc).name[3:]
            except ValueError:
                self.signal_name = str(-rc)
        return rc

    def terminal_message(self) -> wire.Message:
        if self.state == "exited":
            return wire.ExitStatus(self.code)
        if self.state == "signaled":
            return wire.ExitSignal(self.signal_name, False, "")
        raise RuntimeError("process still running")

    def hangup(self) -> None:
        """SIGHUP the process group, as a terminal hangup would."""
        if self.process.returncode is not None:
            return
        try:
            os.killpg(self.process.pid, signal.SIGHUP)
        except (ProcessLookupError, PermissionError):
            try:
                self.process.send_signal(signal.SIGHUP)
            except ProcessLookupError:
                pass


async def run_for_user(username: str, command: Optional[str], env=None, *, pty: Optional[Pty] = None,
                       privileged: bool = False) -> RemoteProcess:
    """Start ``command`` (or a login shell when None) for ``username``."""
    account = lookup_account(username, privileged)
    argv = [account.shell, "-c", command] if command is not None else [account.shell, "-l"]
    kwargs = dict(cwd=account.home if os.path.isdir(account.home) else "/",
                  env=minimal_environment(account, pty.term if pty else None, env),
                  start_new_session=True)
    if privileged:
        kwargs.update(user=account.uid, group=account.gid,
                      extra_groups=os.getgrouplist(account.name, account.gid))
    try:
        if pty is not None:
            proc = await asyncio.create_subprocess_exec(
                *argv, stdin=pty.slave, stdout=pty.slave, stderr=pty.slave,
                preexec_fn=_controlling_tty, **kwargs)
            pty.close_slave()
            return RemoteProcess(proc, pty, _io=_PtyIO(pty.master))
        proc = await asyncio.create_subprocess_exec(
            *argv, stdin=asyncio.subprocess.PIPE, stdout=asyncio.subprocess.PIPE,
            stderr=asyncio.subprocess.PIPE, **kwargs)
        return RemoteProcess(proc)
    except OSError as exc:
        raise ExecError(f"cannot start {argv[0]}: {exc}", ChannelError.SPAWN_FAILED) from None


# -- session channel state machine -------------------------------------------------------------

async def _pump(ch: Channel, read, kind: int) -> None:
    while True:
        data = await read()
        if not data:
            return
        await ch.send_message(wire.Data(kind, data))


async def _await_request(ch: Channel):
    pty_req = None
    pending_size = None
    while True:
        msg = await ch.next_message()
        if msg is None:
            return None, pty_req, pending_size
        if isinstance(msg, wire.PtyRequest):
            if pty_req is not None:
                raise ProtocolViolation("second pty request")
            pty_req = msg
        elif isinstance(msg, wire.WindowChange):
            pending_size = (msg.cols, msg.rows)
        elif isinstance(msg, (wire.ShellRequest, wire.ExecRequest)):
            return msg, pty_req, pending_size
        else:
            raise ProtocolViolation(f"{type(msg).__name__} before shell or exec request")


async def _relay_input(ch: Channel, rp: RemoteProcess) -> None:
    while True:
        msg = await ch.next_message()
        if msg is None:
            if rp.pty is None and rp.process.stdin is not None:
                rp.process.stdin.close()
            return
        if isinstance(msg, wire.Data):
            if msg.kind != wire.DataKind.STDIN:
                continue
            if rp._io is not None:
                rp._io.write(msg.payload)
            elif rp.process.stdin is not None and not rp.process.stdin.is_closing():
                rp.process.stdin.write(msg.payload)
                try:
                    await rp.process.stdin.drain()
                except (BrokenPipeError, ConnectionResetError):
                    pass
        elif isinstance(msg, wire.WindowChange):
            if rp.pty is not None and msg.cols >= 1 and msg.rows >= 1:
                rp.pty.resize(msg.cols, msg.rows)
        else:
            raise ProtocolViolation(f"unexpected {type(msg).__name__} after the request")


async def handle_session_channel(ch: Channel, username: str, *, privileged: bool = False) -> Optional[RemoteProcess]:
    """Drive a session channel until its process ends or the channel dies."""
    try:
        request, pty_req, size = await _await_request(ch)
    except ProtocolViolation as exc:
        log.info("channel %d: %s", ch.id, exc)
        ch.abort(ChannelError.PROTOCOL)
        return None
    if request is None:
        ch.close()
        return None
    pty = None
    try:
        if pty_req is not None:
            cols, rows = size or (pty_req.cols, pty_req.rows)
            try:
                pty = allocate_pty(pty_req.term, cols, rows)
            except ValueError:
                raise ExecError("invalid terminal size", ChannelError.PROTOCOL) from None
        command = request.command if isinstance(request, wire.ExecRequest) else None
        rp = await run_for_user(username, command, pty=pty, privileged=privileged)
    except ExecError as exc:
        log.info("channel %d: %s", ch.id, exc)
        if pty is not None:
            pty.close()
        ch.abort(exc.code)
        return None

    if rp._io is not None:
        pumps = [asyncio.ensure_future(_pump(ch, rp._io.read, wire.DataKind.STDOUT))]
    else:
        pumps = [asyncio.ensure_future(_pump(ch, lambda: rp.process.stdout.read(READ_SIZE), wire.DataKind.STDOUT)),
                 asyncio.ensure_future(_pump(ch, lambda: rp.process.stderr.read(READ_SIZE), wire.DataKind.STDERR))]
    relay = asyncio.ensure_future(_relay_input(ch, rp))
    waiter = asyncio.ensure_future(rp.wait())
    try:
        output = asyncio.gather(*pumps)
        output.add_done_callback(lambda f: f.cancelled() or f.exception())  # retrieved on teardown
        pending = {output, relay}
        while True:
            done, pending = await asyncio.wait(pending, return_when=asyncio.FIRST_COMPLETED)
            if relay in done:
                relay.result()
            if output in done:
                output.result()
                break
        await waiter
        ch.write(rp.terminal_message())
        ch.close()
        await ch.drain()
        relay.cancel()
    except (ChannelClosed, ProtocolViolation) as exc:
        if isinstance(exc, ProtocolViolation):
            log.info("channel %d: %s", ch.id, exc)
            ch.abort(ChannelError.PROTOCOL)
        rp.hangup()
        for t in pumps + [relay]:
            t.cancel()
        try:
            await asyncio.wait_for(asyncio.shield(waiter), 5)
        except asyncio.TimeoutError:
            rp.process.kill()
            await waiter
    except asyncio.CancelledError:
        rp.hangup()
        for t in pumps + [relay]:
            t.cancel()
        raise
    finally:
        if rp._io is not None:
            rp._io.close()
        if rp.pty is not None:
            rp.pty.close()
    return rp
