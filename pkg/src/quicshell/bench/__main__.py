"""Command line entry point: ``quicshell-bench --scenario NAME --rtt MS --n COUNT --out FILE``."""

from __future__ import annotations

import argparse
import asyncio
import os
import shutil
import subprocess
import sys
import time

from .harness import (
    COMMANDS, BenchError, measure_echo_latency, measure_forward_throughput, measure_session_completion,
)
from .proxy import ProxyError
from .report import RunReport, plot, write_csv

SSH_TARGET_ENV = "QUICSHELL_BENCH_SSH"
SCENARIOS = [f"session-{name}" for name in COMMANDS] + ["echo", "forward-tcp", "forward-udp", "sshv2-trivial"]


def sshv2_baseline(n: int, target: str) -> RunReport:
    """Time ``ssh TARGET true`` with an external OpenSSH client."""
    report = RunReport("sshv2-trivial")
    for i in range(n):
        start = time.monotonic()
        done = subprocess.run(["ssh", "-o", "BatchMode=yes", target, "true"], capture_output=True)
        if done.returncode != 0:
            raise BenchError(f"ssh run {i} failed: {done.stderr.decode(errors='replace').strip()}")
        report.samples.append((time.monotonic() - start) * 1000)
    return report


def run_scenario(name: str, rtt: float, n: int, duration: float):
    if name.startswith("session-"):
        return asyncio.run(measure_session_completion(name.split("-", 1)[1], n, rtt))
    if name == "echo":
        return asyncio.run(measure_echo_latency(n, rtt))
    if name.startswith("forward-"):
        return asyncio.run(measure_forward_throughput(name.split("-", 1)[1], duration, n=n))
    target = os.environ.get(SSH_TARGET_ENV)
    if not target or shutil.which("ssh") is None:
        return None
    return sshv2_baseline(n, target)


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quicshell-bench", description=__doc__.split(":")[0])
    p.add_argument("--scenario", choices=SCENARIOS, action="append", required=True,
                   help="repeat to run several scenarios one after another")
    p.add_argument("--rtt", type=float, default=0.0, help="injected round-trip time in ms (default 0)")
    p.add_argument("--n", type=int, default=50, help="samples per scenario (default 50)")
    p.add_argument("--duration", type=float, default=5.0, help="seconds per throughput sample (default 5)")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.add_argument("--plot", metavar="PNG", help="also write a box plot")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    if args.n < 1:
        print("quicshell-bench: --n must be at least 1", file=sys.stderr)
        return 2
    if args.rtt < 0:
        print("quicshell-bench: --rtt must be >= 0", file=sys.stderr)
        return 2
    reports = []
    for name in args.scenario:
        try:
            report = run_scenario(name, args.rtt, args.n, args.duration)
        except (BenchError, ProxyError) as exc:
            print(f"quicshell-bench: {name}: {exc}", file=sys.stderr)
            return 1
        if report is None:
            print(f"{name}: skipped (set {SSH_TARGET_ENV}=user@host and install ssh to run it)")
            continue
        print(report.summary())
        reports.append(report)
    write_csv(reports, args.out)
    if args.plot and reports:
        plot(reports, args.plot)
    return 0


if __name__ == "__main__":
    sys.exit(main())
