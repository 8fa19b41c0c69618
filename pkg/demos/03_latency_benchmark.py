# # Session cost under injected latency
#
# The benchmark harness puts a delay proxy between client and server and
# times complete exec sessions. Run with a small n here; the
# `quicshell-bench` command does the same at scale and writes CSV.

# %%
import asyncio

from quicshell.bench import measure_echo_latency, measure_session_completion, plot

RTT = 100
reports = []
for name in ("trivial", "small", "large"):
    r = asyncio.run(measure_session_completion(name, 5, RTT))
    print(r.summary())
    reports.append(r)

# %% [markdown]
# The round-trip count comes from the proxy's packet log: each run of
# client packets that had to wait for the server is one round trip.
# Output size should barely move the mean.

# %%
print("large minus trivial:", round(reports[2].mean - reports[0].mean, 1), "ms")

# %%
echo = asyncio.run(measure_echo_latency(20, RTT))
print(echo.summary())

# %%
try:
    plot(reports, "session_cost.png")
    print("wrote session_cost.png")
except ImportError:
    print("install the 'plot' extra for matplotlib")
