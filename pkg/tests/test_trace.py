import io

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hostorch.trace import (
    APP,
    ORCH,
    TraceError,
    TraceRecord,
    TraceSink,
    first_divergence,
    format_trace,
    make_details,
    parse_record,
    parse_trace,
    trace_hash,
)

text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=12)

records = st.builds(
    TraceRecord,
    time=st.integers(min_value=0, max_value=10**15),
    seq=st.integers(min_value=0, max_value=10**9),
    channel=st.sampled_from([ORCH, APP]),
    kind=text.filter(bool),
    host=text,
    inst=st.integers(min_value=0, max_value=10**6),
    details=st.dictionaries(text, text, max_size=5).map(make_details),
)


@given(records)
def test_round_trip(rec):
    line = rec.format()
    assert "\n" not in line
    assert parse_record(line) == rec


def test_canonical_line():
    rec = TraceRecord(1500, 3, ORCH, "state", "web-1", 2, make_details({"to": "running", "from": "starting"}))
    assert rec.format() == "t=1500us seq=3 ch=orch kind=state host=web-1 inst=2 from=starting to=running"


def test_values_with_spaces_and_empties():
    rec = TraceRecord(0, 0, ORCH, "x", "-", 0, make_details({"msg": "a b=c", "empty": ""}))
    line = rec.format()
    assert len(line.split(" ")) == 8
    assert parse_record(line).get("msg") == "a b=c"
    assert parse_record(line).get("empty") == ""


@pytest.mark.parametrize("line", [
    "t=1 seq=0 ch=orch kind=a host=b inst=0",
    "t=1us seq=0 ch=net kind=a host=b inst=0",
    "t=1us seq=0 ch=orch kind=a host=b",
    "t=1us seq=0 ch=orch kind=a host=b inst=0 z=1 a=2",
    "t=1us seq=x ch=orch kind=a host=b inst=0",
    "t=1us seq=0 ch=orch kind=a host=b inst=0 novalue",
])
def test_malformed_lines(line):
    with pytest.raises(TraceError):
        parse_record(line)


def test_sink_orders_and_streams(monkeypatch):
    out = io.StringIO()
    sink = TraceSink(out)
    sink.orch(10, "a", "h", 1, k=1)
    sink.orch(5, "b")  # late wall-clock reading is clamped
    sink.app(20, "data", "h", 1, bytes=3)
    recs = parse_trace(out.getvalue())
    assert [(r.time, r.seq) for r in recs] == [(10, 0), (10, 1), (20, 2)]
    assert recs == sink.records
    with pytest.raises(TraceError):
        sink.app(30, "state")


def test_unbuffered_env(monkeypatch):
    monkeypatch.setenv("IM_TRACE_UNBUFFERED", "1")
    assert TraceSink().unbuffered
    monkeypatch.delenv("IM_TRACE_UNBUFFERED")
    assert not TraceSink().unbuffered


def test_divergence_and_hash():
    a = [TraceRecord(i, i, ORCH, "k") for i in range(3)]
    b = a[:2] + [TraceRecord(2, 2, ORCH, "other")]
    assert first_divergence(a, list(a)) is None
    assert first_divergence(a, b) == 2
    assert first_divergence(a, a[:2]) == 2
    assert trace_hash(a) == trace_hash(parse_trace(format_trace(a)))
    assert trace_hash(a) != trace_hash(b)
