"""Resource-usage metrics recomputed from a trace alone."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

from .config import MS, SEC
from .trace import ORCH, TraceError, TraceRecord

# admission latency bucket edges in microseconds; the last bucket is open ended
BUCKET_EDGES = (0, 1 * MS, 10 * MS, 50 * MS, 100 * MS, 200 * MS, 500 * MS, 1 * SEC)
BUCKET_LABELS = ("0", "1ms", "10ms", "50ms", "100ms", "200ms", "500ms", "1s")


@dataclass
class HostMetrics:
    cold_starts: int = 0
    warm_resumes: int = 0
    suspensions: int = 0
    faults: int = 0
    running_us: int = 0
    sleeping_us: int = 0

    @property
    def running_seconds(self) -> float:
        return self.running_us / SEC

    @property
    def sleeping_seconds(self) -> float:
        return self.sleeping_us / SEC


@dataclass
class MetricsReport:
    hosts: Dict[str, HostMetrics] = field(default_factory=dict)
    makespan_us: int = 0
    histogram: Tuple[int, ...] = (0,) * len(BUCKET_EDGES)

    @property
    def num_hosts(self) -> int:
        return len(self.hosts)

    @property
    def total_running_us(self) -> int:
        return sum(h.running_us for h in self.hosts.values())

    @property
    def baseline_us(self) -> int:
        return self.num_hosts * self.makespan_us

    @property
    def savings(self) -> Fraction:
        if self.baseline_us == 0:
            return Fraction(0)
        return 1 - Fraction(self.total_running_us, self.baseline_us)

    def format(self) -> str:
        lines = [
            f"hosts {self.num_hosts}",
            f"makespan_s {self.makespan_us / SEC:.6f}",
            f"host_seconds {self.total_running_us / SEC:.6f}",
            f"always_on_host_seconds {self.baseline_us / SEC:.6f}",
            f"savings_ratio {float(self.savings):.6f}",
        ]
        for name in sorted(self.hosts):
            h = self.hosts[name]
            lines.append(
                f"host {name} cold_starts={h.cold_starts} warm_resumes={h.warm_resumes} "
                f"suspensions={h.suspensions} faults={h.faults} "
                f"running_s={h.running_seconds:.6f} sleeping_s={h.sleeping_seconds:.6f}"
            )
        edges = list(BUCKET_LABELS) + ["inf"]
        for i, n in enumerate(self.histogram):
            lines.append(f"admission [{edges[i]},{edges[i + 1]}) {n}")
        return "\n".join(lines) + "\n"


def bucket_of(latency_us: int) -> int:
    return bisect.bisect_right(BUCKET_EDGES, latency_us) - 1


def compute_metrics(records: Sequence[TraceRecord]) -> MetricsReport:
    """Derive every counter from the trace; the trace must end with ``run-end``."""
    if not records:
        raise TraceError("empty trace")
    last = records[-1]
    if last.kind != "run-end":
        raise TraceError(f"truncated trace: last record is seq={last.seq} kind={last.kind}")
    start_t = records[0].time
    end_t = last.time
    hosts: Dict[str, HostMetrics] = {}
    current: Dict[str, Tuple[str, int]] = {}
    hist: List[int] = [0] * len(BUCKET_EDGES)

    for rec in records:
        if rec.channel != ORCH:
            continue
        if rec.kind == "state":
            m = hosts.setdefault(rec.host, HostMetrics())
            prev, since = current.get(rec.host, (rec.get("from"), rec.time))
            _accumulate(m, prev, rec.time - since)
            to = rec.get("to")
            current[rec.host] = (to, rec.time)
            if to == "starting":
                m.cold_starts += 1
            elif to == "resuming":
                m.warm_resumes += 1
            elif to == "sleeping":
                m.suspensions += 1
            elif to == "failed":
                m.faults += 1
        elif rec.kind == "admit" and rec.get("external") != "true":
            hist[bucket_of(int(rec.get("waited", "0")))] += 1

    for host, (state, since) in current.items():
        _accumulate(hosts[host], state, end_t - since)
    return MetricsReport(hosts=hosts, makespan_us=end_t - start_t, histogram=tuple(hist))


def _accumulate(m: HostMetrics, state: str, dt: int) -> None:
    if state == "running":
        m.running_us += dt
    elif state == "sleeping":
        m.sleeping_us += dt
