import asyncio
import os
import signal

from hostorch.lifecycle import HostState
from hostorch.process import ProcessBackend, process_state, read_port_map
from hostorch.trace import TraceSink
from proc_support import ECHO, SLEEPER, children_of, proc_config, roundtrip, wait_for


def run(coro):
    return asyncio.run(coro)


def test_port_map_and_echo(tmp_path):
    async def scenario():
        b = ProcessBackend(proc_config(ECHO), TraceSink(), tmp_path / "ports")
        await b.up()
        try:
            assert read_port_map(tmp_path / "ports") == b.ports
            assert await roundtrip(b.ports["app-1"], b"hello") == b"hello"
            assert b.orch.records["app-1"].address == "10.0.0.1"
        finally:
            await b.shutdown()
        return b
    b = run(scenario())
    kinds = [r.kind for r in b.sink.records]
    assert kinds[0] == "run-start" and kinds[-1] == "run-end"
    assert "spawned" in kinds


def test_missing_binary_is_start_failure(tmp_path):
    async def scenario():
        b = ProcessBackend(proc_config("/nonexistent/binary {port}", max_restarts=0), TraceSink(),
                           tmp_path / "ports")
        await b.up()
        try:
            reader, writer = await asyncio.open_connection("127.0.0.1", b.ports["app-1"])
            assert await asyncio.wait_for(reader.read(), 5) == b""  # closed without data
            writer.close()
        finally:
            await b.shutdown()
        return b
    b = run(scenario())
    assert b.orch.state_of("app-1") == HostState.TERMINATED
    (reject,) = [r for r in b.sink.records if r.kind == "reject"]
    assert reject.get("reason") == "spawn"


def test_readiness_timeout(tmp_path):
    async def scenario():
        b = ProcessBackend(proc_config(SLEEPER, readiness="300ms", max_restarts=0), TraceSink(),
                           tmp_path / "ports")
        await b.up()
        try:
            reader, writer = await asyncio.open_connection("127.0.0.1", b.ports["app-1"])
            assert await asyncio.wait_for(reader.read(), 5) == b""
            writer.close()
            pid = b.all_handles[0].pid
            await wait_for(lambda: process_state(pid) is None)
        finally:
            await b.shutdown()
        return b
    b = run(scenario())
    (reject,) = [r for r in b.sink.records if r.kind == "reject"]
    assert reject.get("reason") == "readiness-timeout"


def test_killed_process_restarts(tmp_path):
    async def scenario():
        b = ProcessBackend(proc_config(ECHO, idle="10s"), TraceSink(), tmp_path / "ports")
        await b.up()
        try:
            port = b.ports["app-1"]
            assert await roundtrip(port) == b"ping"
            first = b.handles["app-1"]
            os.kill(first.pid, signal.SIGKILL)
            await wait_for(lambda: b.orch.records["app-1"].instance_id == 2
                           and b.orch.state_of("app-1") == HostState.RUNNING)
            assert await roundtrip(port) == b"ping"
            assert b.handles["app-1"].pid != first.pid
        finally:
            await b.shutdown()
        return b
    b = run(scenario())
    causes = [(r.get("from"), r.get("to")) for r in b.sink.records if r.kind == "state"]
    assert ("running", "failed") in causes and ("failed", "starting") in causes


def test_death_while_sleeping_surfaces_on_resume(tmp_path):
    async def scenario():
        b = ProcessBackend(proc_config(ECHO, idle="100ms"), TraceSink(), tmp_path / "ports")
        await b.up()
        try:
            port = b.ports["app-1"]
            assert await roundtrip(port) == b"ping"
            await wait_for(lambda: b.orch.state_of("app-1") == HostState.SLEEPING)
            os.kill(b.handles["app-1"].pid, signal.SIGKILL)
            await asyncio.sleep(0.2)
            assert b.orch.state_of("app-1") == HostState.SLEEPING
            assert await roundtrip(port) == b"ping"  # served by the restarted instance
        finally:
            await b.shutdown()
        return b
    b = run(scenario())
    assert [r.get("cause") for r in b.sink.records if r.get("to") == "failed"] == ["Fault"]


def test_shutdown_leaves_no_children(tmp_path):
    async def scenario():
        b = ProcessBackend(proc_config(ECHO, idle="100ms"), TraceSink(), tmp_path / "ports")
        await b.up()
        assert await roundtrip(b.ports["app-1"]) == b"ping"
        await wait_for(lambda: b.orch.state_of("app-1") == HostState.SLEEPING)
        await b.shutdown()
    run(scenario())
    assert children_of(os.getpid()) == []
