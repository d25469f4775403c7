"""Data plane: per-instance socket tables, byte accounting and signal derivation."""
from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

from .config import AddressAllocator
from .lifecycle import ACTIVE, PASSIVE


class ConnState(str, enum.Enum):
    PENDING = "pending"
    ESTABLISHED = "established"
    CLOSED = "closed"
    RESET = "reset"
    LOST = "lost"


_ALLOWED = {
    ConnState.PENDING: (ConnState.ESTABLISHED, ConnState.RESET),
    ConnState.ESTABLISHED: (ConnState.CLOSED, ConnState.RESET, ConnState.LOST),
}


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class External:
    """An endpoint outside the managed network (client, third-party service)."""

    name: str
    address: str = "198.51.100.1"


Endpoint = Union[str, External]


def endpoint_name(ep: Endpoint) -> str:
    return ep.name if isinstance(ep, External) else ep


@dataclass
class ConnectionRecord:
    conn_id: int
    src: Endpoint
    dst: Endpoint
    created_at: int
    state: ConnState = ConnState.PENDING
    last_activity_at: int = 0
    # index 0 is src -> dst, index 1 is dst -> src
    sent: List[int] = field(default_factory=lambda: [0, 0])
    received: List[int] = field(default_factory=lambda: [0, 0])
    dropped: List[int] = field(default_factory=lambda: [0, 0])

    src_role = ACTIVE
    dst_role = PASSIVE

    def peer_of(self, ep: Endpoint) -> Endpoint:
        if ep == self.src:
            return self.dst
        if ep == self.dst:
            return self.src
        raise ProtocolError(f"{endpoint_name(ep)} is not an endpoint of connection {self.conn_id}")

    def direction(self, sender: Endpoint) -> int:
        if sender == self.src:
            return 0
        if sender == self.dst:
            return 1
        raise ProtocolError(f"{endpoint_name(sender)} is not an endpoint of connection {self.conn_id}")


# socket control operations intercepted from an instance
@dataclass(frozen=True)
class Connect:
    dst: str


@dataclass(frozen=True)
class Listen:
    port: int


@dataclass(frozen=True)
class Accept:
    conn_id: int


@dataclass(frozen=True)
class Close:
    conn_id: int


@dataclass(frozen=True)
class Send:
    conn_id: int
    nbytes: int


@dataclass(frozen=True)
class Recv:
    conn_id: int
    nbytes: int


CONNECT_TO = "connect-to"
SOCKET_ACTIVITY = "socket-activity"
ALL_IDLE = "all-idle"
PROCESS_EXIT = "process-exit"
EXTERNAL_DATA = "external-data"


@dataclass(frozen=True)
class AllocationSignal:
    kind: str
    source: str  # hostname, or external endpoint name for CONNECT_TO
    time: int
    instance_id: Optional[int] = None
    target: Optional[str] = None
    conn_id: Optional[int] = None


@dataclass(frozen=True)
class Classification:
    kind: str  # "internal" | "external"
    role: Optional[str] = None


INTERNAL = Classification("internal")


class Gateway:
    """Tracks every connection between hosts and external endpoints."""

    def __init__(self, allocator: AddressAllocator):
        self.allocator = allocator
        self.conns: Dict[int, ConnectionRecord] = {}
        self.by_host: Dict[str, Dict[int, None]] = {}
        self.listening: Dict[str, List[int]] = {}
        self._next = 1

    # -- table maintenance ---------------------------------------------------

    def open(self, src: Endpoint, dst: Endpoint, now: int) -> ConnectionRecord:
        conn = ConnectionRecord(self._next, src, dst, created_at=now, last_activity_at=now)
        self._next += 1
        self.conns[conn.conn_id] = conn
        for ep in (src, dst):
            if isinstance(ep, str):
                self.by_host.setdefault(ep, {})[conn.conn_id] = None
        return conn

    def retarget(self, conn_id: int, hostname: str) -> ConnectionRecord:
        """Point a pending connection dialed by address at the host owning it."""
        conn = self.get(conn_id)
        if conn.state != ConnState.PENDING:
            raise ProtocolError(f"connection {conn_id} is no longer pending")
        conn.dst = hostname
        self.by_host.setdefault(hostname, {})[conn_id] = None
        return conn

    def get(self, conn_id: int) -> ConnectionRecord:
        try:
            return self.conns[conn_id]
        except KeyError:
            raise ProtocolError(f"unknown connection {conn_id}") from None

    def _move(self, conn: ConnectionRecord, state: ConnState) -> None:
        if state not in _ALLOWED.get(conn.state, ()):
            raise ProtocolError(f"connection {conn.conn_id}: {conn.state.value} -> {state.value}")
        conn.state = state
        if state not in (ConnState.PENDING, ConnState.ESTABLISHED):
            for ep in (conn.src, conn.dst):
                if isinstance(ep, str):
                    self.by_host.get(ep, {}).pop(conn.conn_id, None)

    def establish(self, conn_id: int, now: int) -> ConnectionRecord:
        conn = self.get(conn_id)
        self._move(conn, ConnState.ESTABLISHED)
        conn.last_activity_at = now
        return conn

    def fail(self, conn_id: int) -> ConnectionRecord:
        conn = self.get(conn_id)
        self._move(conn, ConnState.RESET)
        return conn

    def close(self, conn_id: int, now: int) -> ConnectionRecord:
        conn = self.get(conn_id)
        self._move(conn, ConnState.CLOSED)
        conn.last_activity_at = now
        return conn

    def reset_host(self, hostname: str) -> List[Tuple[ConnectionRecord, Endpoint]]:
        """Reset every live connection of ``hostname``; return (conn, peer) pairs.

        Pending connections towards ``hostname`` are left alone: they sit in the
        host's admission queue and are rejected or carried over by the lifecycle.
        """
        out = []
        for cid in list(self.by_host.get(hostname, {})):
            conn = self.conns[cid]
            if conn.state == ConnState.PENDING and conn.dst == hostname:
                continue
            peer = conn.peer_of(hostname)
            self._move(conn, ConnState.RESET)
            out.append((conn, peer))
        return out

    def mark_lost(self, conn_ids) -> List[ConnectionRecord]:
        out = []
        for cid in conn_ids:
            conn = self.conns.get(cid)
            if conn is not None and conn.state == ConnState.ESTABLISHED:
                self._move(conn, ConnState.LOST)
                out.append(conn)
        return out

    def live(self, hostname: str) -> List[ConnectionRecord]:
        return [self.conns[c] for c in self.by_host.get(hostname, {})]

    # -- classification --------------------------------------------------------

    def address_of(self, ep: Endpoint) -> ipaddress.IPv4Address:
        if isinstance(ep, External):
            return ipaddress.ip_address(ep.address)
        return self.allocator.assign(ep)

    def classify_external(self, conn: ConnectionRecord, host: Optional[str] = None) -> Classification:
        """Internal if both endpoints lie in the virtual subnet, else external with
        the managed endpoint's role (active if it initiated, passive if it accepted)."""
        src_in = self.address_of(conn.src) in self.allocator.subnet
        dst_in = self.address_of(conn.dst) in self.allocator.subnet
        if src_in and dst_in:
            return INTERNAL
        if host is None:
            host = endpoint_name(conn.src) if src_in else endpoint_name(conn.dst)
        return Classification("external", ACTIVE if conn.src == host else PASSIVE)

    def counts(self, hostname: str) -> Tuple[int, Tuple[Tuple[int, str], ...]]:
        """(established internal connections, established external (conn_id, role) pairs)."""
        internal = 0
        external = []
        for conn in self.live(hostname):
            if conn.state != ConnState.ESTABLISHED:
                continue
            cls = self.classify_external(conn, hostname)
            if cls.kind == "internal":
                internal += 1
            else:
                external.append((conn.conn_id, cls.role))
        return internal, tuple(external)

    # -- socket operations -------------------------------------------------------

    def on_socket_op(self, instance: str, op, now: int,
                     instance_id: Optional[int] = None) -> List[AllocationSignal]:
        """Record one intercepted socket operation and derive allocation signals."""
        if isinstance(op, Connect):
            conn = self.open(instance, parse_destination(op.dst), now)
            return [AllocationSignal(CONNECT_TO, instance, now, instance_id, op.dst, conn.conn_id)]
        if isinstance(op, Listen):
            self.listening.setdefault(instance, []).append(op.port)
            return []
        conn = self.get(op.conn_id)
        conn.peer_of(instance)  # membership check
        if isinstance(op, Close):
            if conn.state == ConnState.ESTABLISHED:
                self.close(conn.conn_id, now)
            return []
        if conn.state != ConnState.ESTABLISHED:
            raise ProtocolError(f"{type(op).__name__} on {conn.state.value} connection {conn.conn_id}")
        conn.last_activity_at = now
        if isinstance(op, Recv) and self.classify_external(conn, instance).kind == "external":
            return [AllocationSignal(EXTERNAL_DATA, instance, now, instance_id, conn_id=conn.conn_id)]
        return [AllocationSignal(SOCKET_ACTIVITY, instance, now, instance_id, conn_id=conn.conn_id)]

    def forward(self, conn_id: int, sender: Endpoint, nbytes: int, now: int) -> Tuple[str, Endpoint]:
        """Account ``nbytes`` leaving ``sender``; returns (outcome, peer).

        outcome is ``"ok"`` when the payload is on its way, otherwise the
        connection state (``"reset"``, ``"lost"``, ``"closed"``) that refused it.
        """
        conn = self.get(conn_id)
        d = conn.direction(sender)
        peer = conn.peer_of(sender)
        if conn.state != ConnState.ESTABLISHED:
            return conn.state.value, peer
        conn.sent[d] += nbytes
        conn.last_activity_at = now
        return "ok", peer

    def deliver(self, conn_id: int, receiver: Endpoint, nbytes: int, now: int) -> bool:
        """Land in-flight bytes at ``receiver``.

        A graceful close still delivers what was sent before it; bytes on a
        reset or lost connection are dropped.
        """
        conn = self.get(conn_id)
        d = 1 - conn.direction(receiver)
        if conn.state in (ConnState.ESTABLISHED, ConnState.CLOSED):
            conn.received[d] += nbytes
            conn.last_activity_at = now
            return True
        conn.dropped[d] += nbytes
        return False


def parse_destination(dst: str) -> Endpoint:
    """IP literals become External placeholders until the orchestrator maps them."""
    try:
        ipaddress.ip_address(dst)
    except ValueError:
        return dst
    return External(dst, dst)


def is_address(text: str) -> bool:
    try:
        ipaddress.ip_address(text)
        return True
    except ValueError:
        return False
