"""Function manager: registry of host records, timers and action execution.

Everything (signals, backend completions, timer expiry) is fed in through
methods that take an explicit ``now`` in integer microseconds. The orchestrator
never blocks; backends report completion by calling back into it.
"""
from __future__ import annotations

import heapq
import ipaddress
import logging
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

from . import lifecycle as lc
from .config import (
    AddressAllocator,
    Config,
    MappingRule,
    SubnetExhausted,
    resolve_function_type,
    valid_hostname,
)
from .gateway import (
    ALL_IDLE,
    CONNECT_TO,
    EXTERNAL_DATA,
    PROCESS_EXIT,
    SOCKET_ACTIVITY,
    AllocationSignal,
    ConnectionRecord,
    ConnState,
    Endpoint,
    External,
    Gateway,
    ProtocolError,
    Recv,
    Send,
    endpoint_name,
    is_address,
    parse_destination,
)
from .lifecycle import HostRecord, HostState
from .trace import TraceSink

log = logging.getLogger(__name__)

_KIND_ORDER = {k: i for i, k in enumerate(lc.TIMER_KINDS)}

_SIGNAL_EVENTS = {
    SOCKET_ACTIVITY: lc.AppActive,
    ALL_IDLE: lc.AppIdle,
    PROCESS_EXIT: lc.AppExited,
    EXTERNAL_DATA: lc.AppActive,
}


class Backend:
    """What the orchestrator needs from a platform. Completions come back through
    ``Orchestrator.backend_completed``; every request gets exactly one."""

    def start(self, hostname: str, instance_id: int, rule: MappingRule, address: str, now: int):
        pass

    def suspend(self, hostname: str, instance_id: int, now: int):
        pass

    def resume(self, hostname: str, instance_id: int, now: int):
        pass

    def release(self, hostname: str, instance_id: int, now: int):
        pass

    def admitted(self, conn: ConnectionRecord, now: int):
        pass

    def rejected(self, conn: ConnectionRecord, reason: str, now: int):
        pass

    def conn_reset(self, conn: ConnectionRecord, peer: Endpoint, now: int):
        pass

    def conn_lost(self, conn: ConnectionRecord, now: int):
        pass


class Orchestrator:
    def __init__(self, config: Config, backend: Optional[Backend] = None,
                 sink: Optional[TraceSink] = None):
        self.config = config
        self.backend = backend or Backend()
        self.sink = sink or TraceSink()
        self.allocator = AddressAllocator(config.network.subnet)
        self.gateway = Gateway(self.allocator)
        self.records: Dict[str, HostRecord] = {}
        self.rules: Dict[str, MappingRule] = {}
        self._params: Dict[str, lc.LifecycleParams] = {}
        self._rule_hosts: Dict[str, int] = {}
        self._timers: Dict[Tuple[str, str], Tuple[int, int]] = {}
        self._heap: List[Tuple[int, str, int, str, int]] = []
        self._token = 0

    # -- registry ----------------------------------------------------------------

    def address_map(self) -> Dict[str, str]:
        return {h: str(a) for h, a in self.allocator.by_host.items()}

    def state_of(self, hostname: str) -> HostState:
        rec = self.records.get(hostname)
        return rec.state if rec else HostState.UNALLOCATED

    def ensure_record(self, hostname: str, rule: MappingRule) -> HostRecord:
        """Register ``hostname`` (allocating its address) if it is not known yet."""
        rec = self.records.get(hostname)
        if rec is not None:
            return rec
        if self._rule_hosts.get(rule.pattern, 0) >= rule.max_instances:
            raise _Refused(lc.CAPACITY)
        try:
            addr = self.allocator.assign(hostname)
        except SubnetExhausted:
            raise _Refused(lc.SUBNET_EXHAUSTED) from None
        self._rule_hosts[rule.pattern] = self._rule_hosts.get(rule.pattern, 0) + 1
        rec = HostRecord(hostname=hostname, address=str(addr))
        self.records[hostname] = rec
        self.rules[hostname] = rule
        self._params[hostname] = lc.LifecycleParams(
            timing=self.config.timing,
            policy=self.config.policy_for(rule),
            max_restarts=self.config.max_restarts,
        )
        return rec

    # -- timers --------------------------------------------------------------------

    def _schedule(self, hostname: str, kind: str, deadline: int) -> None:
        self._token += 1
        self._timers[(hostname, kind)] = (deadline, self._token)
        heapq.heappush(self._heap, (deadline, hostname, _KIND_ORDER[kind], kind, self._token))

    def _cancel(self, hostname: str, kind: str) -> None:
        self._timers.pop((hostname, kind), None)

    def _prune(self) -> None:
        heap = self._heap
        while heap:
            deadline, host, _, kind, token = heap[0]
            cur = self._timers.get((host, kind))
            if cur is not None and cur[1] == token:
                return
            heapq.heappop(heap)

    def next_deadline(self) -> Optional[int]:
        self._prune()
        return self._heap[0][0] if self._heap else None

    def pending_timers(self) -> Dict[Tuple[str, str], int]:
        return {k: v[0] for k, v in self._timers.items()}

    def tick(self, now: int) -> List:
        """Fire every timer due at or before ``now`` in (deadline, hostname, kind) order."""
        executed: List = []
        while True:
            self._prune()
            if not self._heap or self._heap[0][0] > now:
                return executed
            _, host, _, kind, _ = heapq.heappop(self._heap)
            del self._timers[(host, kind)]
            executed += self._apply(host, lc.TIMER_EVENTS[kind](), now)

    # -- event application --------------------------------------------------------

    def _apply(self, hostname: str, event, now: int) -> List:
        old = self.records[hostname]
        new, actions = lc.apply_event(old, event, now, self._params[hostname])
        self.records[hostname] = new
        touched = [hostname]
        inst = old.instance_id
        sink = self.sink
        for act in actions:
            if isinstance(act, lc.EmitTrace):
                details = dict(act.details)
                if act.kind == "state" and details.get("to") == HostState.STARTING.value:
                    inst = new.instance_id
                sink.orch(now, act.kind, hostname, inst, **details)
            elif isinstance(act, lc.ScheduleTimer):
                self._schedule(hostname, act.kind, now + act.delay)
            elif isinstance(act, lc.CancelTimer):
                self._cancel(hostname, act.kind)
            elif isinstance(act, lc.StartInstance):
                rule = self.rules[hostname]
                sink.orch(now, "backend", hostname, inst, op="start",
                          function_type=rule.function_type, address=new.address)
                self.backend.start(hostname, inst, rule, new.address, now)
            elif isinstance(act, lc.SuspendInstance):
                sink.orch(now, "backend", hostname, inst, op="suspend")
                for conn in self.gateway.mark_lost(act.lost):
                    sink.orch(now, "conn", hostname, inst, conn=conn.conn_id, state="lost",
                              peer=endpoint_name(conn.peer_of(hostname)))
                    self.backend.conn_lost(conn, now)
                self.backend.suspend(hostname, inst, now)
            elif isinstance(act, lc.ResumeInstance):
                sink.orch(now, "backend", hostname, inst, op="resume")
                self.backend.resume(hostname, inst, now)
            elif isinstance(act, lc.ReleaseInstance):
                sink.orch(now, "backend", hostname, inst, op="release")
                self.backend.release(hostname, inst, now)
            elif isinstance(act, lc.ResetConnections):
                for conn, peer in self.gateway.reset_host(hostname):
                    sink.orch(now, "conn", hostname, inst, conn=conn.conn_id, state="reset",
                              peer=endpoint_name(peer))
                    self.backend.conn_reset(conn, peer, now)
                    if isinstance(peer, str) and peer in self.records:
                        touched.append(peer)
            elif isinstance(act, lc.AdmitConnection):
                conn = self.gateway.conns.get(act.conn_id)
                if conn is None or conn.state != ConnState.PENDING:
                    sink.orch(now, "stale-admit", hostname, inst, conn=act.conn_id)
                    continue
                self.gateway.establish(conn.conn_id, now)
                sink.orch(now, "admit", hostname, inst, conn=conn.conn_id,
                          src=endpoint_name(conn.src), waited=act.waited)
                self.backend.admitted(conn, now)
                if isinstance(conn.src, str) and conn.src in self.records:
                    touched.append(conn.src)
            elif isinstance(act, lc.RejectConnection):
                self._reject(act.conn_id, act.reason, now, hostname, inst)
        for host in touched:
            self._sync(host, now)
        return actions

    def _sync(self, hostname: str, now: int) -> None:
        """Copy the gateway's connection counts into the host record."""
        rec = self.records[hostname]
        internal, external = self.gateway.counts(hostname)
        if internal == rec.open_connections and external == rec.external_connections:
            return
        dropped = internal < rec.open_connections or len(external) < len(rec.external_connections)
        self.records[hostname] = rec = replace(
            rec, open_connections=internal, external_connections=external
        )
        if dropped and rec.state == HostState.RUNNING and rec.idle_since is not None:
            # an already idle app may now be suspendable: restart the debounce
            self._schedule(hostname, "idle_debounce", now + self.config.timing.idle_debounce)

    def _reject(self, conn_id: int, reason: str, now: int, hostname: str = "-", inst: int = 0):
        conn = self.gateway.conns.get(conn_id)
        if conn is None or conn.state != ConnState.PENDING:
            self.sink.orch(now, "stale-reject", hostname, inst, conn=conn_id, reason=reason)
            return
        self.gateway.fail(conn_id)
        self.sink.orch(now, "reject", hostname, inst, conn=conn_id,
                       src=endpoint_name(conn.src), reason=reason)
        self.backend.rejected(conn, reason, now)

    # -- public entry points --------------------------------------------------------

    def handle_connect(self, src: Endpoint, dst: str, now: int,
                       conn_id: Optional[int] = None) -> int:
        """Route a connection attempt; the outcome reaches the backend asynchronously."""
        if conn_id is None:
            conn_id = self.gateway.open(src, parse_destination(dst), now).conn_id
        if is_address(dst):
            addr = ipaddress.ip_address(dst)
            if addr not in self.allocator.subnet:
                return self._connect_external(conn_id, now)
            owner = self.allocator.lookup(addr)
            if owner is None:
                self._reject(conn_id, lc.UNKNOWN_HOST, now)
                return conn_id
            self.gateway.retarget(conn_id, owner)
            dst = owner
        if not valid_hostname(dst):
            self._reject(conn_id, lc.MALFORMED_HOST, now, dst)
            return conn_id
        rule = resolve_function_type(dst, self.config)
        if rule is None:
            self._reject(conn_id, lc.UNKNOWN_HOST, now, dst)
            return conn_id
        try:
            rec = self.ensure_record(dst, rule)
        except _Refused as e:
            self._reject(conn_id, e.reason, now, dst)
            return conn_id
        if lc.admit_connection(rec.state, True) == lc.Admission.FAIL:
            reason = lc.HOST_TERMINATED if rec.state == HostState.TERMINATED else lc.HOST_STOPPED
            self._reject(conn_id, reason, now, dst, rec.instance_id)
            return conn_id
        self._apply(dst, lc.ConnectRequested(conn_id), now)
        return conn_id

    def _connect_external(self, conn_id: int, now: int) -> int:
        conn = self.gateway.establish(conn_id, now)
        src = endpoint_name(conn.src)
        inst = self.records[src].instance_id if src in self.records else 0
        self.sink.orch(now, "admit", src, inst, conn=conn_id,
                       dst=endpoint_name(conn.dst), external="true", waited=0)
        self.backend.admitted(conn, now)
        if src in self.records:
            self._sync(src, now)
        return conn_id

    def external_connect(self, name: str, dst: str, now: int, address: str = "198.51.100.1") -> int:
        """Connection from outside the managed network (a client request)."""
        return self.handle_connect(External(name, address), dst, now)

    def report_signal(self, sig: AllocationSignal) -> None:
        if sig.kind == CONNECT_TO:
            src: Endpoint = sig.source
            if sig.source not in self.records and sig.conn_id is not None:
                src = self.gateway.get(sig.conn_id).src
            self.handle_connect(src, sig.target, sig.time, sig.conn_id)
            return
        rec = self.records.get(sig.source)
        if rec is None or (sig.instance_id is not None and sig.instance_id != rec.instance_id):
            self.sink.orch(sig.time, "dropped-signal", sig.source, sig.instance_id or 0,
                           signal=sig.kind)
            return
        self._apply(sig.source, _SIGNAL_EVENTS[sig.kind](), sig.time)

    def signal(self, kind: str, hostname: str, now: int, instance_id: Optional[int] = None):
        self.report_signal(AllocationSignal(kind, hostname, now, instance_id))

    def socket_op(self, hostname: str, op, now: int, instance_id: Optional[int] = None):
        """Intercepted socket control operation from a running instance."""
        rec = self.records.get(hostname)
        if rec is None or rec.state != HostState.RUNNING or (
            instance_id is not None and instance_id != rec.instance_id
        ):
            state = rec.state.value if rec else "unknown"
            self.sink.orch(now, "protocol-error", hostname, instance_id or 0,
                           op=type(op).__name__, state=state)
            return []
        try:
            signals = self.gateway.on_socket_op(hostname, op, now, rec.instance_id)
        except ProtocolError as e:
            self.sink.orch(now, "protocol-error", hostname, rec.instance_id,
                           op=type(op).__name__, error=str(e).replace(" ", "_"))
            return []
        self._sync(hostname, now)
        for sig in signals:
            self.report_signal(sig)
        return signals

    def send(self, sender: Endpoint, conn_id: int, nbytes: int, now: int) -> Tuple[str, Endpoint]:
        """Account a payload leaving ``sender``; returns (outcome, peer)."""
        outcome, peer = self.gateway.forward(conn_id, sender, nbytes, now)
        name = endpoint_name(sender)
        inst = self.records[name].instance_id if isinstance(sender, str) and name in self.records else 0
        self.sink.orch(now, "forward", name, inst, conn=conn_id, bytes=nbytes, outcome=outcome)
        if outcome == "ok" and isinstance(sender, str):
            self.socket_op(sender, Send(conn_id, nbytes), now)
        return outcome, peer

    def receive(self, receiver: Endpoint, conn_id: int, nbytes: int, now: int) -> bool:
        """Land in-flight bytes; returns False if they were dropped."""
        ok = self.gateway.deliver(conn_id, receiver, nbytes, now)
        name = endpoint_name(receiver)
        if not ok:
            self.sink.orch(now, "drop", name, 0, conn=conn_id, bytes=nbytes)
            return False
        if isinstance(receiver, str):
            if self.gateway.conns[conn_id].state == ConnState.ESTABLISHED:
                self.socket_op(receiver, Recv(conn_id, nbytes), now)
            else:
                self.signal(SOCKET_ACTIVITY, receiver, now)
        return True

    def close(self, closer: Endpoint, conn_id: int, now: int) -> None:
        conn = self.gateway.conns.get(conn_id)
        if conn is None or conn.state != ConnState.ESTABLISHED:
            return
        self.gateway.close(conn_id, now)
        name = endpoint_name(closer)
        inst = self.records[name].instance_id if name in self.records else 0
        self.sink.orch(now, "conn", name, inst, conn=conn_id, state="closed")
        for ep in (conn.src, conn.dst):
            if isinstance(ep, str) and ep in self.records:
                self._sync(ep, now)

    def backend_completed(self, hostname: str, instance_id: int, event, now: int) -> None:
        """StartCompleted / StartFailed / ResumeCompleted from the backend."""
        rec = self.records.get(hostname)
        if rec is None or rec.instance_id != instance_id:
            self.sink.orch(now, "stale-completion", hostname, instance_id,
                           event=lc.event_name(event))
            return
        self._apply(hostname, event, now)

    def handle_fault(self, hostname: str, now: int, instance_id: Optional[int] = None) -> None:
        rec = self.records.get(hostname)
        if rec is None:
            self.sink.orch(now, "noop", hostname, 0, event="Fault", state="unallocated")
            return
        if instance_id is not None and instance_id != rec.instance_id:
            self.sink.orch(now, "stale-fault", hostname, instance_id)
            return
        self._apply(hostname, lc.Fault(), now)

    def admin_reset(self, hostname: str, now: int) -> None:
        if hostname in self.records:
            self._apply(hostname, lc.AdminReset(), now)

    def check_consistency(self) -> None:
        """Assert that record connection counts mirror the socket table."""
        for host, rec in self.records.items():
            internal, external = self.gateway.counts(host)
            assert rec.open_connections == internal, (host, rec.open_connections, internal)
            assert rec.external_connections == external, (host, rec.external_connections, external)
            if rec.state == HostState.SLEEPING:
                assert rec.open_connections == 0, host


class _Refused(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason
