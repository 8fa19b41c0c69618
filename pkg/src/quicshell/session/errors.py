from __future__ import annotations

import enum


class SessionError(Exception):
    pass


class AuthenticationError(SessionError):
    def __init__(self, schemes):
        self.schemes = tuple(schemes)
        super().__init__("authentication failed; server accepts: " + (", ".join(self.schemes) or "nothing"))


class PathNotFound(SessionError):
    def __init__(self, path: str):
        super().__init__(f"no SSH3 endpoint at {path!r} (404)")
        self.path = path


class ConnectionSetupError(SessionError):
    pass


class TransportError(SessionError):
    pass


class ChannelRejected(SessionError):
    pass


class ChannelError(enum.IntEnum):
    """Application error codes used when resetting channel streams."""

    CLOSED = 0x5333_0000
    PROTOCOL = 0x5333_0001
    CHANNEL_LIMIT = 0x5333_0002
    UNKNOWN_CHANNEL_TYPE = 0x5333_0003
    UNKNOWN_CONVERSATION = 0x5333_0004
    REFUSED = 0x5333_0005
    DNS = 0x5333_0006
    TIMEOUT = 0x5333_0007
    UNKNOWN_USER = 0x5333_0008
    SPAWN_FAILED = 0x5333_0009
    DATAGRAMS_UNAVAILABLE = 0x5333_000A
    SHUTDOWN = 0x5333_000B
    UNREACHABLE = 0x5333_000C

    @property
    def reason(self) -> str:
        return self.name.lower().replace("_", "-")


def reason_for(code: int) -> str:
    try:
        return ChannelError(code).reason
    except ValueError:
        return f"error-0x{code:x}"


class ChannelClosed(SessionError):
    """The channel was reset or the connection went away."""

    def __init__(self, reason: str, code: int | None = None):
        super().__init__(f"channel closed: {reason}")
        self.reason = reason
        self.code = code
