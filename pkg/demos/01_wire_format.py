# # The channel wire format
#
# Every channel starts with a preamble naming its type, then carries
# length-prefixed frames. Integers use QUIC's variable-length encoding.
# This script prints a few encodings so the layout can be read by eye.

# %%
from quicshell import wire

for value in (0, 37, 15293, 494878333, 151288809941952652):
    print(f"{value:>20} -> {wire.encode_varint(value).hex(' ')}")

# %% [markdown]
# A session channel opens with its type string; forwarding channels add the
# target. The decoder returns the value and how many bytes it consumed.

# %%
for p in (wire.ChannelPreamble.session(),
          wire.ChannelPreamble.tcp("db.internal", 5432),
          wire.ChannelPreamble.udp("10.0.0.53", 53, 4)):
    enc = wire.encode_preamble(p)
    print(enc.hex(" "), "->", wire.decode_preamble(enc))

# %% [markdown]
# A typical exec exchange, client messages first, then what the server sends back.

# %%
exchange = [
    wire.PtyRequest("xterm-256color", 120, 40),
    wire.ExecRequest("uname -a"),
    wire.Data(wire.DataKind.STDOUT, b"Linux box 6.1.0 x86_64\n"),
    wire.ExitStatus(0),
]
stream = b"".join(wire.encode_frame(m) for m in exchange)
print(len(stream), "bytes on the stream")

# %% [markdown]
# The streaming decoder copes with arbitrary chunking, as QUIC may deliver
# the stream in any split.

# %%
dec = wire.FrameDecoder()
got = []
for i in range(0, len(stream), 5):
    dec.feed(stream[i:i + 5])
    while (m := dec.next()) is not None:
        got.append(m)
assert got == exchange
for m in got:
    print(m)
