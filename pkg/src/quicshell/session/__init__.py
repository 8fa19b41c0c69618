from .channel import Channel
from .client import Trust, client_open_conversation
from .conversation import Conversation
from .errors import (
    AuthenticationError, ChannelClosed, ChannelError, ChannelRejected, ConnectionSetupError, PathNotFound,
    SessionError, TransportError,
)
from .server import Server
from .transport import TransportOptions

__all__ = [
    "AuthenticationError", "Channel", "ChannelClosed", "ChannelError", "ChannelRejected",
    "ConnectionSetupError", "Conversation", "PathNotFound", "Server", "SessionError", "TransportError",
    "TransportOptions", "Trust", "client_open_conversation",
]
