"""Deterministic discrete-event simulation of the FaaS platform and network.

Virtual time is integer microseconds. Scripted applications drive traffic;
the orchestrator reacts exactly as it would against a real backend.

Scenario file format::

    [script web]            # function type
    on_data:
      connect db-1 as db
      send db 100
      close db
      send peer 200
      declare_idle

    [stimuli]
    at 0ms connect web-1 as client
    at 300ms send client 50
    at 2s close client
    at 5s fault web-1
"""
from __future__ import annotations

import hashlib
import heapq
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

from . import lifecycle as lc
from .config import MIN, Config, MappingRule, parse_duration, serialize_config
from .gateway import (
    ALL_IDLE,
    PROCESS_EXIT,
    SOCKET_ACTIVITY,
    Accept,
    ConnectionRecord,
    ConnState,
    Connect,
    Endpoint,
    External,
    Listen,
    endpoint_name,
)
from .orchestrator import Backend, Orchestrator
from .trace import TraceRecord, TraceSink

HANDLERS = ("on_start", "on_connection", "on_data", "on_timer")
PRIMITIVES = ("connect", "send", "close", "sleep", "set_timer", "exit", "declare_idle", "listen")
STIMULI = ("connect", "fault", "send", "close", "peer-send")
_INSTANCE_EVENTS = ("start-done", "resume-done", "lifetime", "wake", "app-timer")

# without an explicit horizon the run stops at quiescence or after one virtual day
DEFAULT_HORIZON_CAP = 24 * 60 * MIN


class ScenarioError(Exception):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class ScriptError(Exception):
    pass


@dataclass(frozen=True)
class Primitive:
    op: str
    args: Tuple[str, ...] = ()
    line: int = 0


@dataclass(frozen=True)
class Script:
    function_type: str
    handlers: Tuple[Tuple[str, Tuple[Primitive, ...]], ...] = ()

    def handler(self, name: str) -> Tuple[Primitive, ...]:
        for n, prims in self.handlers:
            if n == name:
                return prims
        return ()


@dataclass(frozen=True)
class Stimulus:
    time: int
    op: str
    target: str
    arg: Optional[str] = None
    name: Optional[str] = None


@dataclass(frozen=True)
class Scenario:
    scripts: Tuple[Script, ...] = ()
    stimuli: Tuple[Stimulus, ...] = ()

    def script_for(self, function_type: str) -> Optional[Script]:
        for s in self.scripts:
            if s.function_type == function_type:
                return s
        return None


def inject_fault(hostname: str, at: int) -> Stimulus:
    return Stimulus(at, "fault", hostname)


def _check_primitive(op: str, args: List[str], line: int) -> None:
    if op not in PRIMITIVES:
        raise ScenarioError(f"unknown primitive {op!r}", line)
    nargs = len(args)
    if op == "connect" and not (nargs == 1 or (nargs == 3 and args[1] == "as")):
        raise ScenarioError("usage: connect <host> [as <name>]", line)
    if op == "send" and nargs not in (1, 2):
        raise ScenarioError("usage: send [<conn>] <bytes>", line)
    if op == "send" and not args[-1].isdigit():
        raise ScenarioError(f"byte count {args[-1]!r} is not an integer", line)
    if op == "close" and nargs > 1:
        raise ScenarioError("usage: close [<conn>]", line)
    if op in ("sleep", "set_timer"):
        if nargs != 1:
            raise ScenarioError(f"usage: {op} <duration>", line)
        try:
            if parse_duration(args[0]) <= 0:
                raise ValueError
        except ValueError:
            raise ScenarioError(f"{op} needs a positive duration", line) from None
    if op in ("exit", "declare_idle") and nargs:
        raise ScenarioError(f"{op} takes no arguments", line)
    if op == "listen" and (nargs != 1 or not args[0].isdigit()):
        raise ScenarioError("usage: listen <port>", line)


def parse_scenario(text: str) -> Scenario:
    scripts: List[Script] = []
    stimuli: List[Stimulus] = []
    section = None
    ftype = None
    handlers: Dict[str, List[Primitive]] = {}
    current: Optional[List[Primitive]] = None

    def flush():
        if ftype is not None:
            for name, prims in handlers.items():
                for i, p in enumerate(prims):
                    if p.op in ("declare_idle", "exit") and i != len(prims) - 1:
                        raise ScenarioError(f"{p.op} must be the last primitive of {name}", p.line)
            scripts.append(Script(ftype, tuple((n, tuple(p)) for n, p in handlers.items())))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            flush()
            ftype, handlers, current = None, {}, None
            head = line.strip("[]").split()
            if head == ["stimuli"]:
                section = "stimuli"
            elif len(head) == 2 and head[0] == "script":
                section = "script"
                ftype = head[1]
                if any(s.function_type == ftype for s in scripts):
                    raise ScenarioError(f"duplicate script {ftype!r}", lineno)
            else:
                raise ScenarioError(f"unknown section {line!r}", lineno)
            continue
        if section == "script":
            if line.endswith(":"):
                name = line[:-1].strip()
                if name not in HANDLERS:
                    raise ScenarioError(f"unknown handler {name!r}", lineno)
                if name in handlers:
                    raise ScenarioError(f"duplicate handler {name!r}", lineno)
                current = handlers[name] = []
                continue
            if current is None:
                raise ScenarioError("primitive outside of a handler", lineno)
            op, *args = line.split()
            _check_primitive(op, args, lineno)
            current.append(Primitive(op, tuple(args), lineno))
        elif section == "stimuli":
            stimuli.append(_parse_stimulus(line, lineno))
        else:
            raise ScenarioError("content before the first section", lineno)
    flush()
    return Scenario(tuple(scripts), tuple(stimuli))


def _parse_stimulus(line: str, lineno: int) -> Stimulus:
    parts = line.split()
    if len(parts) < 4 or parts[0] != "at":
        raise ScenarioError("usage: at <time> <op> <target> ...", lineno)
    try:
        t = parse_duration(parts[1])
    except ValueError:
        raise ScenarioError(f"bad time {parts[1]!r}", lineno) from None
    op, target, rest = parts[2], parts[3], parts[4:]
    if op not in STIMULI:
        raise ScenarioError(f"unknown stimulus {op!r}", lineno)
    if op == "connect":
        if rest and not (len(rest) == 2 and rest[0] == "as"):
            raise ScenarioError("usage: at <time> connect <host> [as <name>]", lineno)
        return Stimulus(t, op, target, name=rest[1] if rest else None)
    if op in ("send", "peer-send"):
        if len(rest) != 1 or not rest[0].isdigit():
            raise ScenarioError(f"usage: at <time> {op} <target> <bytes>", lineno)
        return Stimulus(t, op, target, arg=rest[0])
    if rest:
        raise ScenarioError(f"{op} takes a single target", lineno)
    return Stimulus(t, op, target)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as f:
        return parse_scenario(f.read())


@dataclass
class _Frame:
    prims: Tuple[Primitive, ...]
    pc: int = 0
    names: Dict[str, int] = field(default_factory=dict)
    default: Optional[int] = None


@dataclass
class SimInstance:
    hostname: str
    instance_id: int
    function_type: str
    started_at: int
    script: Optional[Script]
    state: str = "starting"  # starting | running | suspended | dead
    mailbox: Deque[Tuple[str, Optional[int]]] = field(default_factory=deque)
    frame: Optional[_Frame] = None
    waiting: Optional[Tuple[str, int]] = None
    timer_period: Optional[int] = None
    timer_token: int = 0
    timer_overdue: bool = False
    lost: List[int] = field(default_factory=list)
    pumping: bool = False


class Simulator(Backend):
    """Runs one scenario. Also serves as the orchestrator's backend."""

    def __init__(self, config: Config, scenario: Scenario, seed: int = 0,
                 horizon: Optional[int] = None, sink: Optional[TraceSink] = None):
        self.config = config
        self.scenario = scenario
        self.seed = seed
        self.horizon = horizon
        self.sink = sink or TraceSink(unbuffered=False)
        self.orch = Orchestrator(config, self, self.sink)
        self.rng = random.Random(seed)
        self.now = 0
        self._queue: List[Tuple[int, int, str, tuple]] = []
        self._seq = 0
        self.instances: Dict[str, SimInstance] = {}
        self.ext_names: Dict[str, int] = {}
        self.outbound_ext: Dict[str, List[int]] = {}
        self.admitted_conns: Dict[int, None] = {}
        self.in_flight: Dict[int, int] = {}
        self.error: Optional[str] = None
        self._wake_token = 0

    # -- event queue ---------------------------------------------------------------

    def _at(self, time: int, kind: str, *payload) -> None:
        heapq.heappush(self._queue, (time, self._seq, kind, payload))
        self._seq += 1

    def latency(self) -> int:
        net = self.config.network
        if net.jitter:
            return net.rtt + self.rng.randint(0, net.jitter)
        return net.rtt

    def run(self) -> List[TraceRecord]:
        cfg_hash = hashlib.sha256(serialize_config(self.config).encode()).hexdigest()[:16]
        self.sink.orch(0, "run-start", config=cfg_hash, seed=self.seed,
                       horizon=self.horizon if self.horizon is not None else "none")
        for stim in sorted(self.scenario.stimuli, key=lambda s: s.time):
            self._at(stim.time, "stimulus", stim)
        cap = self.horizon if self.horizon is not None else DEFAULT_HORIZON_CAP
        while self.error is None:
            tq = self._queue[0][0] if self._queue else None
            to = self.orch.next_deadline()
            if tq is None and to is None:
                break
            t = min(x for x in (tq, to) if x is not None)
            if t > cap:
                break
            if tq is not None and (to is None or tq <= to):
                _, _, kind, payload = heapq.heappop(self._queue)
                if kind in _INSTANCE_EVENTS and self._live(payload[0], payload[1]) is None:
                    continue  # belongs to a released instance; must not extend the run
                self.now = t
                try:
                    getattr(self, "_ev_" + kind.replace("-", "_"))(*payload)
                except ScriptError as e:
                    self.error = str(e)
                    self.sink.orch(self.now, "script-error", error=str(e).replace(" ", "_"))
            else:
                self.now = t
                self.orch.tick(t)
        end = self.horizon if self.horizon is not None and self.error is None else self.now
        details = {"in_flight_bytes": sum(self.in_flight.values())}
        if self.error is not None:
            details["aborted"] = "script-error"
        self.sink.orch(end, "run-end", **details)
        return self.sink.records

    # -- stimuli --------------------------------------------------------------------

    def _ev_stimulus(self, stim: Stimulus) -> None:
        now = self.now
        if stim.op == "connect":
            name = stim.name or f"client{len(self.ext_names) + 1}"
            cid = self.orch.external_connect(name, stim.target, now)
            self.ext_names[name] = cid
        elif stim.op == "fault":
            self.orch.handle_fault(stim.target, now)
        elif stim.op == "send":
            cid = self.ext_names.get(stim.target)
            if cid is None:
                raise ScriptError(f"stimulus send: unknown external connection {stim.target}")
            self._send(self.orch.gateway.conns[cid].src, cid, int(stim.arg))
        elif stim.op == "close":
            cid = self.ext_names.get(stim.target)
            if cid is None:
                raise ScriptError(f"stimulus close: unknown external connection {stim.target}")
            self.orch.close(self.orch.gateway.conns[cid].src, cid, now)
        elif stim.op == "peer-send":
            for cid in self.outbound_ext.get(stim.target, []):
                conn = self.orch.gateway.conns[cid]
                if conn.state in (ConnState.ESTABLISHED, ConnState.LOST):
                    self._send(conn.dst, cid, int(stim.arg))

    # -- network --------------------------------------------------------------------

    def _send(self, sender: Endpoint, cid: int, nbytes: int) -> None:
        outcome, peer = self.orch.send(sender, cid, nbytes, self.now)
        if outcome == "ok":
            self.in_flight[cid] = self.in_flight.get(cid, 0) + nbytes
            self._at(self.now + self.latency(), "data", cid, peer, nbytes, sender)
        elif outcome in ("lost", "reset"):
            # the refusal comes back over the wire like any other segment
            self._at(self.now + self.latency(), "reset", cid, sender)

    def _inst_of(self, ep: Endpoint) -> Optional[SimInstance]:
        if isinstance(ep, External):
            return None
        inst = self.instances.get(ep)
        return inst if inst is not None and inst.state != "dead" else None

    def _app(self, kind: str, ep: Endpoint, **details) -> None:
        inst = self._inst_of(ep)
        self.sink.app(self.now, kind, endpoint_name(ep), inst.instance_id if inst else 0, **details)

    def _app_reset(self, ep: Endpoint, cid: int) -> None:
        if isinstance(ep, str) and self._inst_of(ep) is None:
            return
        self._app("connection-reset", ep, conn=cid)
        inst = self._inst_of(ep)
        if inst is not None and inst.waiting == ("connect", cid):
            inst.waiting = None
            self._pump(inst)

    def _ev_data(self, cid: int, receiver: Endpoint, nbytes: int, sender: Endpoint) -> None:
        self.in_flight[cid] -= nbytes
        conn = self.orch.gateway.conns[cid]
        if self.orch.receive(receiver, cid, nbytes, self.now):
            self._app("data", receiver, conn=cid, bytes=nbytes)
            inst = self._inst_of(receiver)
            if inst is not None:
                inst.mailbox.append(("on_data", cid))
                self._pump(inst)
        elif conn.state == ConnState.LOST:
            self._app_reset(sender, cid)

    def _ev_connected(self, cid: int) -> None:
        conn = self.orch.gateway.conns[cid]
        if conn.state != ConnState.ESTABLISHED:
            return
        self._app("connected", conn.src, conn=cid, peer=endpoint_name(conn.dst), role="active")
        if isinstance(conn.dst, str):
            self._app("connected", conn.dst, conn=cid, peer=endpoint_name(conn.src), role="passive")
            self.orch.socket_op(conn.dst, Accept(cid), self.now)
            inst = self._inst_of(conn.dst)
            if inst is not None:
                inst.mailbox.append(("on_connection", cid))
                self._pump(inst)
        src = self._inst_of(conn.src)
        if src is not None and src.waiting == ("connect", cid):
            src.waiting = None
            self._pump(src)

    def _ev_reset(self, cid: int, ep: Endpoint) -> None:
        self._app_reset(ep, cid)

    # -- backend contract -------------------------------------------------------------

    def start(self, hostname: str, instance_id: int, rule: MappingRule, address: str, now: int):
        inst = SimInstance(hostname, instance_id, rule.function_type, now,
                           self.scenario.script_for(rule.function_type))
        self.instances[hostname] = inst
        self._at(now + self.config.timing.cold_start_latency, "start-done", hostname, instance_id)
        lifetime = self.config.limits_for(rule.function_type).max_lifetime
        if lifetime is not None:
            self._at(now + lifetime, "lifetime", hostname, instance_id)

    def suspend(self, hostname: str, instance_id: int, now: int):
        inst = self._live(hostname, instance_id)
        if inst is not None:
            inst.state = "suspended"

    def resume(self, hostname: str, instance_id: int, now: int):
        self._at(now + self.config.timing.resume_latency, "resume-done", hostname, instance_id)

    def release(self, hostname: str, instance_id: int, now: int):
        inst = self._live(hostname, instance_id)
        if inst is not None:
            inst.state = "dead"
            inst.mailbox.clear()
            inst.frame = None
            inst.waiting = None

    def admitted(self, conn: ConnectionRecord, now: int):
        self.admitted_conns[conn.conn_id] = None
        if isinstance(conn.dst, External) and isinstance(conn.src, str):
            self.outbound_ext.setdefault(conn.src, []).append(conn.conn_id)
        self._at(now + self.latency(), "connected", conn.conn_id)

    def rejected(self, conn: ConnectionRecord, reason: str, now: int):
        self._app("connection-failed", conn.src, conn=conn.conn_id, reason=reason)
        inst = self._inst_of(conn.src)
        if inst is not None and inst.waiting == ("connect", conn.conn_id):
            inst.waiting = None
            self._pump(inst)

    def conn_reset(self, conn: ConnectionRecord, peer: Endpoint, now: int):
        if conn.conn_id in self.admitted_conns:
            self._at(now + self.latency(), "reset", conn.conn_id, peer)

    def conn_lost(self, conn: ConnectionRecord, now: int):
        for ep in (conn.src, conn.dst):
            inst = self._inst_of(ep)
            if inst is not None:
                inst.lost.append(conn.conn_id)

    def _live(self, hostname: str, instance_id: int) -> Optional[SimInstance]:
        inst = self.instances.get(hostname)
        if inst is None or inst.instance_id != instance_id or inst.state == "dead":
            return None
        return inst

    def _ev_start_done(self, hostname: str, instance_id: int) -> None:
        inst = self._live(hostname, instance_id)
        if inst is None:
            return
        inst.state = "running"
        if inst.script and inst.script.handler("on_start"):
            inst.mailbox.append(("on_start", None))
        self.orch.backend_completed(hostname, instance_id, lc.StartCompleted(), self.now)
        self._pump(inst)

    def _ev_resume_done(self, hostname: str, instance_id: int) -> None:
        inst = self._live(hostname, instance_id)
        if inst is None:
            return
        inst.state = "running"
        self.orch.backend_completed(hostname, instance_id, lc.ResumeCompleted(), self.now)
        for cid in inst.lost:
            self._app("connection-reset", hostname, conn=cid)
        inst.lost.clear()
        if inst.timer_overdue:
            inst.timer_overdue = False
            self._fire_app_timer(inst)
        self._pump(inst)

    def _ev_lifetime(self, hostname: str, instance_id: int) -> None:
        inst = self._live(hostname, instance_id)
        if inst is None:
            return
        rec = self.orch.records[hostname]
        if rec.state in lc.ALIVE and rec.instance_id == instance_id:
            self.sink.orch(self.now, "lifetime-exceeded", hostname, instance_id)
            self.orch.handle_fault(hostname, self.now, instance_id)

    # -- application runtime ----------------------------------------------------------

    def _ev_wake(self, hostname: str, instance_id: int, token: int) -> None:
        inst = self._live(hostname, instance_id)
        if inst is not None and inst.waiting == ("sleep", token):
            inst.waiting = None
            self._pump(inst)

    def _ev_app_timer(self, hostname: str, instance_id: int, token: int) -> None:
        inst = self._live(hostname, instance_id)
        if inst is None or token != inst.timer_token:
            return
        self._at(self.now + inst.timer_period, "app-timer", hostname, instance_id, token)
        if inst.state == "running":
            self._fire_app_timer(inst)
            self._pump(inst)
        else:
            inst.timer_overdue = True

    def _fire_app_timer(self, inst: SimInstance) -> None:
        if inst.script and inst.script.handler("on_timer"):
            inst.mailbox.append(("on_timer", None))

    def _pump(self, inst: SimInstance) -> None:
        if inst.pumping:
            return
        inst.pumping = True
        try:
            while inst.state == "running" and inst.waiting is None:
                if inst.frame is None:
                    if not inst.mailbox:
                        return
                    handler, trigger = inst.mailbox.popleft()
                    prims = inst.script.handler(handler) if inst.script else ()
                    names = {"peer": trigger} if trigger is not None else {}
                    inst.frame = _Frame(prims, 0, names, trigger)
                    if handler in ("on_start", "on_timer"):
                        self.orch.signal(SOCKET_ACTIVITY, inst.hostname, self.now, inst.instance_id)
                frame = inst.frame
                if frame.pc >= len(frame.prims):
                    inst.frame = None
                    continue
                prim = frame.prims[frame.pc]
                frame.pc += 1
                self._step(inst, frame, prim)
        finally:
            inst.pumping = False

    def _conn_arg(self, inst: SimInstance, frame: _Frame, prim: Primitive, name: Optional[str]) -> int:
        if name is None:
            if frame.default is None:
                raise ScriptError(f"{inst.function_type} line {prim.line}: no connection in scope")
            return frame.default
        if name not in frame.names:
            raise ScriptError(f"{inst.function_type} line {prim.line}: unknown connection {name!r}")
        return frame.names[name]

    def _step(self, inst: SimInstance, frame: _Frame, prim: Primitive) -> None:
        now = self.now
        host = inst.hostname
        op, args = prim.op, prim.args
        if op == "connect":
            signals = self.orch.socket_op(host, Connect(args[0]), now, inst.instance_id)
            if not signals:
                raise ScriptError(f"{inst.function_type} line {prim.line}: connect refused locally")
            cid = signals[0].conn_id
            frame.default = cid
            if len(args) == 3:
                frame.names[args[2]] = cid
            # admitted or queued: block until "connected" / failure arrives
            if self.orch.gateway.conns[cid].state in (ConnState.PENDING, ConnState.ESTABLISHED):
                inst.waiting = ("connect", cid)
        elif op == "send":
            cid = self._conn_arg(inst, frame, prim, args[0] if len(args) == 2 else None)
            frame.default = cid
            self._send(host, cid, int(args[-1]))
        elif op == "close":
            cid = self._conn_arg(inst, frame, prim, args[0] if args else None)
            self.orch.close(host, cid, now)
        elif op == "sleep":
            self._wake_token += 1
            inst.waiting = ("sleep", self._wake_token)
            self._at(now + parse_duration(args[0]), "wake", host, inst.instance_id, self._wake_token)
        elif op == "set_timer":
            inst.timer_period = parse_duration(args[0])
            inst.timer_token += 1
            self._at(now + inst.timer_period, "app-timer", host, inst.instance_id, inst.timer_token)
        elif op == "listen":
            self.orch.socket_op(host, Listen(int(args[0])), now, inst.instance_id)
            self._app("listening", host, port=args[0])
        elif op == "declare_idle":
            if not inst.mailbox:
                self.orch.signal(ALL_IDLE, host, now, inst.instance_id)
        elif op == "exit":
            inst.frame = None
            inst.mailbox.clear()
            self.orch.signal(PROCESS_EXIT, host, now, inst.instance_id)


def run_scenario(config: Config, scenario: Scenario, seed: int = 0,
                 horizon: Optional[int] = None, sink: Optional[TraceSink] = None) -> List[TraceRecord]:
    """Run ``scenario`` to quiescence (or ``horizon``) and return the full trace."""
    return Simulator(config, scenario, seed, horizon, sink).run()
