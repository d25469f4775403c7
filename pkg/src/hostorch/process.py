"""Local-process backend: host functions are OS processes behind a loopback TCP proxy.

Each configured hostname gets a gateway port on 127.0.0.1. A client connecting
to that port is held while the orchestrator starts or resumes the process,
then spliced to the port the process actually listens on. Suspension is
SIGSTOP/SIGCONT on the process group.

Fidelity gaps: process-internal runnability is invisible here, so a host
counts as idle once it has no proxied connections and no proxied data for
``idle_debounce``; all proxied peers are external (loopback) endpoints.
"""
from __future__ import annotations

import asyncio
import logging
import os
import shlex
import signal
import socket
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

from . import lifecycle as lc
from .config import SEC, Config, MappingRule
from .gateway import ALL_IDLE, PROCESS_EXIT, ConnectionRecord, Endpoint, External
from .lifecycle import HostState
from .orchestrator import Backend, Orchestrator
from .trace import TraceSink

log = logging.getLogger(__name__)

READINESS_POLL = 0.02
TICK = 0.01
KILL_GRACE = 2.0
CHUNK = 65536


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def write_port_map(path, ports: Dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for host in sorted(ports):
            f.write(f"{host} {ports[host]}\n")


def read_port_map(path) -> Dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                host, port = line.split()
                out[host] = int(port)
    return out


def process_state(pid: int) -> Optional[str]:
    """Single-letter scheduler state from /proc (``T`` = stopped), None if gone."""
    try:
        with open(f"/proc/{pid}/stat", encoding="ascii") as f:
            data = f.read()
    except (FileNotFoundError, ProcessLookupError):
        return None
    return data[data.rindex(")") + 2]


@dataclass
class ProcHandle:
    hostname: str
    instance_id: int
    port: int
    proc: Optional[asyncio.subprocess.Process] = None
    ready: bool = False
    suspended: bool = False
    released: bool = False
    resume_started: float = 0.0
    tasks: list = field(default_factory=list)

    @property
    def pid(self) -> Optional[int]:
        return self.proc.pid if self.proc else None

    def alive(self) -> bool:
        return self.proc is not None and self.proc.returncode is None

    def signal_group(self, sig: int) -> None:
        if self.alive():
            try:
                os.killpg(self.proc.pid, sig)
            except ProcessLookupError:
                pass


class ProcessBackend(Backend):
    def __init__(self, config: Config, sink: Optional[TraceSink] = None,
                 port_map_path: str = "portmap.txt"):
        self.config = config
        self.sink = sink or TraceSink()
        self.orch = Orchestrator(config, self, self.sink)
        self.port_map_path = os.path.abspath(port_map_path)
        self.ports: Dict[str, int] = {}
        self.handles: Dict[str, ProcHandle] = {}
        self.all_handles: list = []
        self._servers: list = []
        self._waiters: Dict[int, asyncio.Future] = {}
        self._writers: Dict[int, list] = {}
        self._t0 = time.monotonic_ns()
        self._ticker: Optional[asyncio.Task] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None

    def now(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1000

    # -- lifecycle of the backend itself ----------------------------------------------

    async def up(self) -> None:
        self._loop = asyncio.get_running_loop()
        self.sink.orch(self.now(), "run-start", backend="process")
        for host, port in self.config.hosts:
            server = await asyncio.start_server(
                lambda r, w, h=host: self._on_client(h, r, w), "127.0.0.1", port
            )
            self._servers.append(server)
            self.ports[host] = server.sockets[0].getsockname()[1]
        write_port_map(self.port_map_path, self.ports)
        self._ticker = asyncio.create_task(self._tick_loop())

    async def shutdown(self) -> None:
        if self._ticker:
            self._ticker.cancel()
        for server in self._servers:
            server.close()
        for writers in list(self._writers.values()):
            for w in writers:
                w.close()
        for handle in self.all_handles:
            if not handle.released:
                self._kill(handle)
        for handle in self.all_handles:
            if handle.proc is not None:
                try:
                    await asyncio.wait_for(handle.proc.wait(), KILL_GRACE + 1)
                except asyncio.TimeoutError:
                    handle.signal_group(signal.SIGKILL)
                    await handle.proc.wait()
            for task in handle.tasks:
                task.cancel()
        for server in self._servers:
            await server.wait_closed()
        self.sink.orch(self.now(), "run-end")

    async def _tick_loop(self) -> None:
        while True:
            await asyncio.sleep(TICK)
            self.orch.tick(self.now())

    def _later(self, fn, *args) -> None:
        # never re-enter the orchestrator from inside an action it is executing
        self._loop.call_soon(fn, *args)

    # -- gateway data plane ---------------------------------------------------------------

    async def _on_client(self, host: str, reader, writer) -> None:
        peer = writer.get_extra_info("peername")
        src = External(f"tcp-{peer[1]}", "127.0.0.1")
        now = self.now()
        conn = self.orch.gateway.open(src, host, now)
        fut = self._loop.create_future()
        self._waiters[conn.conn_id] = fut
        self.orch.handle_connect(src, host, now, conn.conn_id)
        outcome = await fut
        if outcome is not True:
            writer.close()
            return
        handle = self.handles.get(host)
        try:
            b_reader, b_writer = await asyncio.open_connection("127.0.0.1", handle.port)
        except (OSError, AttributeError):
            self.orch.close(src, conn.conn_id, self.now())
            writer.close()
            return
        self._writers[conn.conn_id] = [writer, b_writer]
        await asyncio.gather(
            self._pipe(conn.conn_id, src, host, reader, b_writer),
            self._pipe(conn.conn_id, host, src, b_reader, writer),
        )
        self._writers.pop(conn.conn_id, None)
        self.orch.close(src, conn.conn_id, self.now())
        if not self.orch.gateway.live(host) and self.orch.state_of(host) == HostState.RUNNING:
            self.orch.signal(ALL_IDLE, host, self.now())

    async def _pipe(self, cid: int, sender: Endpoint, receiver: Endpoint, reader, writer) -> None:
        try:
            while True:
                data = await reader.read(CHUNK)
                if not data:
                    break
                outcome, _ = self.orch.send(sender, cid, len(data), self.now())
                if outcome != "ok":
                    break
                writer.write(data)
                await writer.drain()
                self.orch.receive(receiver, cid, len(data), self.now())
        except (ConnectionError, OSError):
            pass
        finally:
            try:
                writer.close()
            except RuntimeError:
                pass

    # -- backend contract ---------------------------------------------------------------

    def admitted(self, conn: ConnectionRecord, now: int):
        fut = self._waiters.pop(conn.conn_id, None)
        if fut is not None and not fut.done():
            fut.set_result(True)

    def rejected(self, conn: ConnectionRecord, reason: str, now: int):
        fut = self._waiters.pop(conn.conn_id, None)
        if fut is not None and not fut.done():
            fut.set_result(reason)

    def conn_reset(self, conn: ConnectionRecord, peer: Endpoint, now: int):
        for w in self._writers.pop(conn.conn_id, []):
            w.transport.abort()

    def conn_lost(self, conn: ConnectionRecord, now: int):
        self.conn_reset(conn, conn.src, now)

    def start(self, hostname: str, instance_id: int, rule: MappingRule, address: str, now: int):
        handle = ProcHandle(hostname, instance_id, free_port())
        self.handles[hostname] = handle
        self.all_handles.append(handle)
        handle.tasks.append(asyncio.ensure_future(self._spawn(handle, rule, address)))

    async def _spawn(self, handle: ProcHandle, rule: MappingRule, address: str) -> None:
        host, inst = handle.hostname, handle.instance_id
        spec = self.config.process_for(rule.function_type)
        if spec is None:
            self.orch.backend_completed(host, inst, lc.StartFailed("no-process-spec"), self.now())
            return
        argv = shlex.split(spec.render(hostname=host, address=address, port=handle.port,
                                       portmap=self.port_map_path))
        env = dict(os.environ)
        env.update(dict(spec.env))
        try:
            handle.proc = await asyncio.create_subprocess_exec(
                *argv, env=env, cwd=spec.workdir, stdin=asyncio.subprocess.DEVNULL,
                stdout=asyncio.subprocess.DEVNULL, start_new_session=True,
            )
        except OSError as e:
            log.info("spawn of %s failed: %s", host, e)
            self.orch.backend_completed(host, inst, lc.StartFailed("spawn"), self.now())
            return
        self.sink.orch(self.now(), "spawned", host, inst, pid=handle.proc.pid)
        handle.tasks.append(asyncio.ensure_future(self._watch(handle)))
        deadline = time.monotonic() + spec.readiness_timeout / SEC
        while not handle.released:
            if handle.proc.returncode is not None:
                self.orch.backend_completed(host, inst, lc.StartFailed("exited"), self.now())
                return
            if await _port_open(handle.port):
                handle.ready = True
                self.orch.backend_completed(host, inst, lc.StartCompleted(), self.now())
                return
            if time.monotonic() > deadline:
                self.orch.backend_completed(host, inst, lc.StartFailed("readiness-timeout"),
                                            self.now())
                return
            await asyncio.sleep(READINESS_POLL)

    async def _watch(self, handle: ProcHandle) -> None:
        code = await handle.proc.wait()
        if handle.released or not handle.ready:
            return
        host, inst = handle.hostname, handle.instance_id
        self.sink.orch(self.now(), "exited", host, inst, code=code)
        if self.orch.state_of(host) == HostState.SLEEPING:
            return  # noticed on the next resume attempt
        if code == 0:
            self.orch.signal(PROCESS_EXIT, host, self.now(), inst)
        else:
            self.orch.handle_fault(host, self.now(), inst)

    def _handle(self, hostname: str, instance_id: int) -> Optional[ProcHandle]:
        handle = self.handles.get(hostname)
        if handle is None or handle.instance_id != instance_id:
            return None
        return handle

    def suspend(self, hostname: str, instance_id: int, now: int):
        handle = self._handle(hostname, instance_id)
        if handle is None or handle.suspended:
            self.sink.orch(now, "noop", hostname, instance_id, op="suspend")
            return
        handle.suspended = True
        handle.signal_group(signal.SIGSTOP)

    def resume(self, hostname: str, instance_id: int, now: int):
        handle = self._handle(hostname, instance_id)
        if handle is None or not handle.alive():
            self._later(self._fault, hostname, instance_id)
            return
        handle.resume_started = time.monotonic()
        handle.signal_group(signal.SIGCONT)
        handle.suspended = False
        self._later(self._resumed, handle)

    def _resumed(self, handle: ProcHandle) -> None:
        if not handle.alive():
            self._fault(handle.hostname, handle.instance_id)
            return
        latency = int((time.monotonic() - handle.resume_started) * SEC)
        self.sink.orch(self.now(), "resume-latency", handle.hostname, handle.instance_id,
                       us=latency)
        self.orch.backend_completed(handle.hostname, handle.instance_id, lc.ResumeCompleted(),
                                    self.now())

    def _fault(self, hostname: str, instance_id: int) -> None:
        self.orch.handle_fault(hostname, self.now(), instance_id)

    def release(self, hostname: str, instance_id: int, now: int):
        handle = self._handle(hostname, instance_id)
        if handle is not None:
            self._kill(handle)

    def _kill(self, handle: ProcHandle) -> None:
        handle.released = True
        if not handle.alive():
            return
        handle.signal_group(signal.SIGCONT)
        handle.signal_group(signal.SIGTERM)

        async def reap():
            try:
                await asyncio.wait_for(handle.proc.wait(), KILL_GRACE)
            except asyncio.TimeoutError:
                handle.signal_group(signal.SIGKILL)
        handle.tasks.append(asyncio.ensure_future(reap()))


async def _port_open(port: int) -> bool:
    try:
        _, w = await asyncio.wait_for(asyncio.open_connection("127.0.0.1", port), 0.5)
    except (OSError, asyncio.TimeoutError):
        return False
    w.close()
    return True


async def serve(config: Config, sink: TraceSink, port_map_path: str,
                duration: Optional[float] = None) -> ProcessBackend:
    """Run the process backend until ``duration`` elapses or SIGINT/SIGTERM arrives."""
    backend = ProcessBackend(config, sink, port_map_path)
    await backend.up()
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    try:
        if duration is None:
            await stop.wait()
        else:
            try:
                await asyncio.wait_for(stop.wait(), duration)
            except asyncio.TimeoutError:
                pass
    finally:
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.remove_signal_handler(sig)
        await backend.shutdown()
    return backend
