"""Canonical line-delimited trace records.

One record per line::

    t=<int>us seq=<int> ch=<orch|app> kind=<ident> host=<name> inst=<int> <k=v ...>

Detail keys are sorted, so byte equality of two traces is semantic equality.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, TextIO, Tuple
from urllib.parse import quote, unquote

ORCH = "orch"
APP = "app"

# everything an application is allowed to observe
APP_KINDS = frozenset({"connected", "connection-failed", "connection-reset", "data", "listening"})

_SAFE = "-_.:/*+,@"


class TraceError(Exception):
    pass


def _enc(value: str) -> str:
    # a bare "%" never comes out of percent-encoding, so it can stand for ""
    return quote(value, safe=_SAFE) if value else "%"


def _dec(value: str) -> str:
    return "" if value == "%" else unquote(value, errors="strict")


@dataclass(frozen=True)
class TraceRecord:
    time: int
    seq: int
    channel: str
    kind: str
    host: str = "-"
    inst: int = 0
    details: Tuple[Tuple[str, str], ...] = ()

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.details:
            if k == key:
                return v
        return default

    def format(self) -> str:
        parts = [
            f"t={self.time}us",
            f"seq={self.seq}",
            f"ch={self.channel}",
            f"kind={_enc(self.kind)}",
            f"host={_enc(self.host)}",
            f"inst={self.inst}",
        ]
        parts += [f"{_enc(k)}={_enc(v)}" for k, v in self.details]
        return " ".join(parts)


def make_details(items) -> Tuple[Tuple[str, str], ...]:
    if isinstance(items, dict):
        items = items.items()
    return tuple(sorted((str(k), str(v)) for k, v in items))


def parse_record(line: str) -> TraceRecord:
    fields = line.rstrip("\n").split(" ")
    if len(fields) < 6:
        raise TraceError(f"short trace record: {line!r}")
    head = []
    for expected, field in zip(("t", "seq", "ch", "kind", "host", "inst"), fields[:6]):
        key, sep, value = field.partition("=")
        if key != expected or not sep:
            raise TraceError(f"expected {expected}= in {line!r}")
        head.append(value)
    if not head[0].endswith("us"):
        raise TraceError(f"time without unit in {line!r}")
    details = []
    for field in fields[6:]:
        key, sep, value = field.partition("=")
        if not sep:
            raise TraceError(f"detail without '=' in {line!r}")
        details.append((_dec(key), _dec(value)))
    try:
        rec = TraceRecord(
            time=int(head[0][:-2]),
            seq=int(head[1]),
            channel=head[2],
            kind=_dec(head[3]),
            host=_dec(head[4]),
            inst=int(head[5]),
            details=tuple(details),
        )
    except ValueError as e:
        raise TraceError(f"bad number in {line!r}") from e
    if rec.channel not in (ORCH, APP):
        raise TraceError(f"unknown channel {rec.channel!r}")
    if list(rec.details) != sorted(rec.details):
        raise TraceError(f"detail keys not sorted in {line!r}")
    return rec


def parse_trace(text: str) -> List[TraceRecord]:
    return [parse_record(line) for line in text.splitlines() if line.strip()]


def read_trace(path) -> List[TraceRecord]:
    with open(path, encoding="utf-8") as f:
        return parse_trace(f.read())


def format_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(r.format() + "\n" for r in records)


def trace_hash(records: Iterable[TraceRecord]) -> str:
    return hashlib.sha256(format_trace(records).encode()).hexdigest()


class TraceSink:
    """Collects records in (time, seq) order and optionally streams them to a file."""

    def __init__(self, stream: Optional[TextIO] = None, unbuffered: Optional[bool] = None):
        self.records: List[TraceRecord] = []
        self.stream = stream
        if unbuffered is None:
            unbuffered = os.environ.get("IM_TRACE_UNBUFFERED") == "1"
        self.unbuffered = unbuffered
        self._seq = 0
        self._last = 0

    def emit(self, time: int, channel: str, kind: str, host: str = "-", inst: int = 0,
             **details) -> TraceRecord:
        # wall-clock backends may hand in a time slightly behind the last record
        time = max(time, self._last)
        rec = TraceRecord(time, self._seq, channel, kind, host, inst, make_details(details))
        self._seq += 1
        self._last = time
        self.records.append(rec)
        if self.stream is not None:
            self.stream.write(rec.format() + "\n")
            if self.unbuffered:
                self.stream.flush()
        return rec

    def orch(self, time: int, kind: str, host: str = "-", inst: int = 0, **details):
        return self.emit(time, ORCH, kind, host, inst, **details)

    def app(self, time: int, kind: str, host: str = "-", inst: int = 0, **details):
        if kind not in APP_KINDS:
            raise TraceError(f"{kind!r} is not an application-visible record kind")
        return self.emit(time, APP, kind, host, inst, **details)


def first_divergence(a: List[TraceRecord], b: List[TraceRecord]) -> Optional[int]:
    """Index of the first differing record, or None if the traces are identical."""
    for i, (x, y) in enumerate(zip(a, b)):
        if x.format() != y.format():
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None


def iter_host(records: Iterable[TraceRecord], host: str) -> Iterator[TraceRecord]:
    return (r for r in records if r.host == host)
