"""Benchmark results: samples, summary statistics, CSV and plots."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

CSV_COLUMNS = ("scenario", "sample_index", "value_ms_or_mbps", "rtt_count")


@dataclass
class RunReport:
    scenario: str
    samples: list = field(default_factory=list)
    rtt_counts: list = field(default_factory=list)
    unit: str = "ms"
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rtt_counts and len(self.rtt_counts) != len(self.samples):
            raise ValueError("need one round-trip count per sample (or none)")

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def mean(self) -> float:
        if not self.samples:
            return math.nan
        return math.fsum(self.samples) / len(self.samples)

    @property
    def std(self) -> float:
        """Sample standard deviation; zero for a single sample."""
        if len(self.samples) < 2:
            return 0.0 if self.samples else math.nan
        m = self.mean
        return math.sqrt(math.fsum((x - m) ** 2 for x in self.samples) / (len(self.samples) - 1))

    @property
    def median(self) -> float:
        if not self.samples:
            return math.nan
        s = sorted(self.samples)
        mid = len(s) // 2
        return s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2

    @property
    def rtt_count(self) -> Optional[int]:
        return max(self.rtt_counts) if self.rtt_counts else None

    def summary(self) -> str:
        line = (f"{self.scenario}: n={self.n} mean={self.mean:.2f} {self.unit} "
                f"median={self.median:.2f} std={self.std:.2f}")
        if self.rtt_counts:
            line += f" round-trips<={self.rtt_count}"
        for key, value in self.notes.items():
            line += f" {key}={value}"
        return line

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i, value in enumerate(self.samples):
            count = self.rtt_counts[i] if self.rtt_counts else ""
            w.writerow((self.scenario, i, repr(float(value)), count))
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> list["RunReport"]:
        """Parse CSV text (or a path) back into one report per scenario."""
        text = source if isinstance(source, str) and "\n" in source else Path(source).read_text()
        reports: dict[str, RunReport] = {}
        rows = csv.DictReader(io.StringIO(text))
        if tuple(rows.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"expected columns {', '.join(CSV_COLUMNS)}")
        for row in rows:
            r = reports.setdefault(row["scenario"], cls(row["scenario"]))
            if int(row["sample_index"]) != len(r.samples):
                raise ValueError(f"sample_index out of order for {row['scenario']}")
            r.samples.append(float(row["value_ms_or_mbps"]))
            if row["rtt_count"]:
                r.rtt_counts.append(int(row["rtt_count"]))
        return list(reports.values())


def write_csv(reports, path) -> None:
    parts = [r.to_csv() for r in reports]
    text = parts[0] + "".join(p.split("\n", 1)[1] for p in parts[1:]) if parts else ",".join(CSV_COLUMNS) + "\n"
    Path(path).write_text(text)


def plot(reports, path) -> None:
    """Box plot of every report's samples, one box per scenario."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(reports)), 4))
    ax.boxplot([r.samples for r in reports], labels=[r.scenario for r in reports])
    units = {r.unit for r in reports}
    ax.set_ylabel(units.pop() if len(units) == 1 else "value")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
