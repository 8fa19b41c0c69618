"""Latency, echo and throughput measurements for quicshell."""

from .harness import (
    BenchError, COMMANDS, LoopbackRig, measure_echo_latency, measure_forward_throughput, measure_session_completion,
    probe_rtt, udp_echo_server,
)
from .proxy import C2S, S2C, LatencyProxy, PacketEvent, ProxyError, count_round_trips
from .report import RunReport, plot, write_csv

__all__ = [
    "BenchError", "C2S", "COMMANDS", "LatencyProxy", "PacketEvent", "ProxyError", "RunReport", "S2C", "LoopbackRig",
    "count_round_trips", "measure_echo_latency", "measure_forward_throughput", "measure_session_completion",
    "plot", "probe_rtt", "udp_echo_server", "write_csv",
]
