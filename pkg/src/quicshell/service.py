"""Default server-side channel dispatch."""

from __future__ import annotations

from . import wire
from .forward import serve_tcp_channel, serve_udp_channel
from .process import handle_session_channel
from .session.errors import ChannelError


def channel_dispatcher(*, privileged: bool = False, forwarding: bool = True):
    """Build a ``Server`` handler serving sessions and, optionally, forwarding."""

    async def dispatch(conv, ch):
        if ch.type == wire.SESSION:
            await handle_session_channel(ch, conv.username, privileged=privileged)
        elif forwarding and ch.type == wire.DIRECT_TCP:
            await serve_tcp_channel(conv, ch)
        elif forwarding and ch.type == wire.DIRECT_UDP:
            await serve_udp_channel(conv, ch)
        else:
            ch.abort(ChannelError.REFUSED)

    return dispatch
