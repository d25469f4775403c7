"""Pure host-function lifecycle state machine.

``apply_event`` maps (record, event, now) to a new record plus a list of
actions. It never touches a clock, a backend or a socket; the orchestrator
executes the returned actions.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

from .config import ExternalConnPolicy, KEEP_RUNNING, TimingParams


class HostState(str, enum.Enum):
    UNALLOCATED = "unallocated"
    STARTING = "starting"
    RUNNING = "running"
    SLEEPING = "sleeping"
    RESUMING = "resuming"
    STOPPED = "stopped"
    TERMINATED = "terminated"
    FAILED = "failed"


TERMINAL = (HostState.STOPPED, HostState.TERMINATED)
ALIVE = (HostState.RUNNING, HostState.SLEEPING, HostState.RESUMING)

# fixed tie-break order for timers firing at the same deadline
TIMER_KINDS = ("connect_timeout", "idle_debounce", "keep_warm", "sleep_ttl")

ACTIVE = "active"
PASSIVE = "passive"


class Admission(str, enum.Enum):
    PROCEED = "proceed"
    RESUME_THEN_PROCEED = "resume-then-proceed"
    INSTANTIATE_THEN_PROCEED = "instantiate-then-proceed"
    FAIL = "fail"


# reject reasons visible to the application
UNKNOWN_HOST = "unknown-host"
HOST_TERMINATED = "host-terminated"
HOST_STOPPED = "host-stopped"
ADMISSION_TIMEOUT = "admission-timeout"
SUBNET_EXHAUSTED = "subnet-exhausted"
QUEUE_FULL = "queue-full"
MALFORMED_HOST = "malformed-host"
CAPACITY = "capacity"
START_FAILED = "start-failed"
FAULT = "fault"


# --- events ----------------------------------------------------------------

@dataclass(frozen=True)
class ConnectRequested:
    conn_id: int


@dataclass(frozen=True)
class StartCompleted:
    pass


@dataclass(frozen=True)
class StartFailed:
    reason: str = START_FAILED


@dataclass(frozen=True)
class ResumeCompleted:
    pass


@dataclass(frozen=True)
class AppActive:
    pass


@dataclass(frozen=True)
class AppIdle:
    pass


@dataclass(frozen=True)
class IdleDebounceElapsed:
    pass


@dataclass(frozen=True)
class KeepWarmTimer:
    pass


@dataclass(frozen=True)
class SleepTtlExpired:
    pass


@dataclass(frozen=True)
class ConnectTimeout:
    pass


@dataclass(frozen=True)
class AppExited:
    pass


@dataclass(frozen=True)
class Fault:
    reason: str = FAULT


@dataclass(frozen=True)
class AdminReset:
    pass


TIMER_EVENTS = {
    "connect_timeout": ConnectTimeout,
    "idle_debounce": IdleDebounceElapsed,
    "keep_warm": KeepWarmTimer,
    "sleep_ttl": SleepTtlExpired,
}


def event_name(event) -> str:
    return type(event).__name__


# --- actions ---------------------------------------------------------------

@dataclass(frozen=True)
class StartInstance:
    pass


@dataclass(frozen=True)
class SuspendInstance:
    lost: Tuple[int, ...] = ()


@dataclass(frozen=True)
class ResumeInstance:
    pass


@dataclass(frozen=True)
class ReleaseInstance:
    pass


@dataclass(frozen=True)
class ResetConnections:
    pass


@dataclass(frozen=True)
class ScheduleTimer:
    kind: str
    delay: int


@dataclass(frozen=True)
class CancelTimer:
    kind: str


@dataclass(frozen=True)
class AdmitConnection:
    conn_id: int
    waited: int = 0


@dataclass(frozen=True)
class RejectConnection:
    conn_id: int
    reason: str


@dataclass(frozen=True)
class EmitTrace:
    kind: str
    details: Tuple[Tuple[str, str], ...] = ()


# --- record ----------------------------------------------------------------

@dataclass(frozen=True)
class HostRecord:
    hostname: str
    address: str = ""
    instance_id: int = 0
    state: HostState = HostState.UNALLOCATED
    state_entered_at: int = 0
    pending: Tuple[Tuple[int, int], ...] = ()  # (conn_id, enqueued_at)
    open_connections: int = 0
    external_connections: Tuple[Tuple[int, str], ...] = ()  # (conn_id, role)
    idle_since: Optional[int] = None
    restart_count: int = 0
    keep_warm_probe: bool = False
    ttl_deadline: Optional[int] = None


@dataclass(frozen=True)
class LifecycleParams:
    timing: TimingParams = field(default_factory=TimingParams)
    policy: ExternalConnPolicy = KEEP_RUNNING
    max_restarts: int = 3
    queue_capacity: int = 1024


DEFAULT_PARAMS = LifecycleParams()


def admit_connection(dest_state: HostState, dest_resolvable: bool) -> Admission:
    """Decide what must happen before a connection to ``dest_state`` may proceed."""
    if dest_state == HostState.RUNNING:
        return Admission.PROCEED
    if dest_state in (HostState.SLEEPING, HostState.RESUMING):
        return Admission.RESUME_THEN_PROCEED
    if dest_state == HostState.STARTING:
        return Admission.INSTANTIATE_THEN_PROCEED
    if dest_state == HostState.UNALLOCATED and dest_resolvable:
        return Admission.INSTANTIATE_THEN_PROCEED
    return Admission.FAIL


def _preemptible(role: str, policy: ExternalConnPolicy) -> bool:
    return not (policy.distinguish_endpoint_role and role == PASSIVE)


def external_policy_gate(record: HostRecord, policy: ExternalConnPolicy, now: int) -> bool:
    """Whether the record's external connections allow suspending it at ``now``."""
    ext = record.external_connections
    if not ext:
        return True
    if policy.kind == "keep-running":
        return False
    if not all(_preemptible(role, policy) for _, role in ext):
        return False
    if policy.kind == "preemptible":
        return True
    idle_since = record.idle_since if record.idle_since is not None else now
    return now - idle_since >= policy.warm_for


def _trace(actions: list, kind: str, **details) -> None:
    actions.append(EmitTrace(kind, tuple(sorted((k, str(v)) for k, v in details.items()))))


def _goto(rec: HostRecord, state: HostState, now: int, cause: str, actions: list) -> HostRecord:
    _trace(actions, "state", **{"from": rec.state.value, "to": state.value, "cause": cause})
    return replace(rec, state=state, state_entered_at=now)


def _enqueue(rec: HostRecord, conn_id: int, now: int, actions: list,
             params: LifecycleParams) -> HostRecord:
    if len(rec.pending) >= params.queue_capacity:
        actions.append(RejectConnection(conn_id, QUEUE_FULL))
        return rec
    if not rec.pending:
        actions.append(ScheduleTimer("connect_timeout", params.timing.connect_timeout))
    return replace(rec, pending=rec.pending + ((conn_id, now),))


def _admit_all(rec: HostRecord, now: int, actions: list) -> HostRecord:
    if rec.pending:
        actions.append(CancelTimer("connect_timeout"))
    for conn_id, enq in rec.pending:
        actions.append(AdmitConnection(conn_id, now - enq))
    return replace(rec, pending=())


def _reject_all(rec: HostRecord, reason: str, actions: list) -> HostRecord:
    if rec.pending:
        actions.append(CancelTimer("connect_timeout"))
    for conn_id, _ in rec.pending:
        actions.append(RejectConnection(conn_id, reason))
    return replace(rec, pending=())


def _enter_starting(rec: HostRecord, now: int, cause: str, actions: list) -> HostRecord:
    rec = _goto(rec, HostState.STARTING, now, cause, actions)
    actions.append(StartInstance())
    return replace(
        rec,
        instance_id=rec.instance_id + 1,
        open_connections=0,
        external_connections=(),
        idle_since=None,
        keep_warm_probe=False,
        ttl_deadline=None,
    )


def _fail(rec: HostRecord, reason: str, now: int, cause: str, actions: list,
          params: LifecycleParams, carry_queue: bool = False) -> HostRecord:
    """Enter Failed, release everything, then apply the restart budget.

    With ``carry_queue`` the queued connections wait for the restarted
    instance instead of being rejected (they only fail if no restart is left).
    """
    rec = _goto(rec, HostState.FAILED, now, cause, actions)
    restarting = rec.restart_count < params.max_restarts
    if not (carry_queue and restarting):
        rec = _reject_all(rec, reason, actions)
    for kind in TIMER_KINDS[1:]:
        actions.append(CancelTimer(kind))
    actions.append(ReleaseInstance())
    actions.append(ResetConnections())
    rec = replace(rec, open_connections=0, external_connections=(), idle_since=None)
    if restarting:
        rec = replace(rec, restart_count=rec.restart_count + 1)
        return _enter_starting(rec, now, "restart", actions)
    return _goto(rec, HostState.TERMINATED, now, "restart-budget", actions)


def _suspend(rec: HostRecord, now: int, actions: list, params: LifecycleParams) -> HostRecord:
    timing = params.timing
    lost = tuple(cid for cid, _ in rec.external_connections)
    deadline = rec.ttl_deadline if rec.keep_warm_probe and rec.ttl_deadline is not None \
        else now + timing.sleep_ttl
    rec = _goto(rec, HostState.SLEEPING, now, "IdleDebounceElapsed", actions)
    actions.append(SuspendInstance(lost))
    remaining = max(deadline - now, 0)
    if timing.keep_warm_period < remaining:
        actions.append(ScheduleTimer("keep_warm", timing.keep_warm_period))
    actions.append(ScheduleTimer("sleep_ttl", remaining))
    return replace(rec, external_connections=(), ttl_deadline=deadline)


def apply_event(record: HostRecord, event, now: int,
                params: LifecycleParams = DEFAULT_PARAMS) -> Tuple[HostRecord, List]:
    """Apply one lifecycle event; return the new record and the actions to execute.

    (state, event) pairs without a transition are no-ops that only emit a
    ``noop`` trace action.
    """
    S = HostState
    rec = record
    state = rec.state
    actions: List = []
    name = event_name(event)

    if isinstance(event, ConnectRequested):
        cid = event.conn_id
        if state == S.UNALLOCATED:
            rec = _enter_starting(rec, now, name, actions)
            return _enqueue(rec, cid, now, actions, params), actions
        if state == S.STARTING:
            return _enqueue(rec, cid, now, actions, params), actions
        if state == S.RESUMING:
            rec = replace(rec, keep_warm_probe=False)
            return _enqueue(rec, cid, now, actions, params), actions
        if state == S.RUNNING:
            actions.append(AdmitConnection(cid, 0))
            return replace(rec, keep_warm_probe=False), actions
        if state == S.SLEEPING:
            rec = _goto(rec, S.RESUMING, now, name, actions)
            actions += [ResumeInstance(), CancelTimer("keep_warm"), CancelTimer("sleep_ttl")]
            rec = replace(rec, keep_warm_probe=False)
            return _enqueue(rec, cid, now, actions, params), actions
        reason = HOST_STOPPED if state in (S.STOPPED, S.FAILED) else HOST_TERMINATED
        actions.append(RejectConnection(cid, reason))
        return rec, actions

    if isinstance(event, StartCompleted) and state == S.STARTING:
        rec = _goto(rec, S.RUNNING, now, name, actions)
        return _admit_all(rec, now, actions), actions

    if isinstance(event, (StartFailed, Fault)) and state == S.STARTING:
        reason = event.reason if isinstance(event, StartFailed) else FAULT
        return _fail(rec, reason, now, name, actions, params), actions

    if isinstance(event, ResumeCompleted) and state == S.RESUMING:
        rec = _goto(rec, S.RUNNING, now, name, actions)
        rec = _admit_all(rec, now, actions)
        if rec.idle_since is not None:
            # still idle from before suspension: the ordinary idle path re-suspends
            actions.append(ScheduleTimer("idle_debounce", params.timing.idle_debounce))
        return rec, actions

    if isinstance(event, AppIdle) and state == S.RUNNING:
        actions.append(ScheduleTimer("idle_debounce", params.timing.idle_debounce))
        return replace(rec, idle_since=now), actions

    if isinstance(event, AppActive) and state == S.RUNNING:
        if rec.idle_since is not None:
            actions.append(CancelTimer("idle_debounce"))
        return replace(rec, idle_since=None, keep_warm_probe=False), actions

    if isinstance(event, IdleDebounceElapsed) and state == S.RUNNING and rec.idle_since is not None:
        if rec.open_connections > 0:
            _trace(actions, "blocked", reason="connections", open=rec.open_connections)
            return rec, actions
        policy = params.policy
        if not external_policy_gate(rec, policy, now):
            waiting = policy.kind == "warm-for" and all(
                _preemptible(role, policy) for _, role in rec.external_connections
            )
            _trace(actions, "blocked", reason="external", policy=policy.kind)
            if waiting:
                actions.append(
                    ScheduleTimer("idle_debounce", rec.idle_since + policy.warm_for - now)
                )
            return rec, actions
        return _suspend(rec, now, actions, params), actions

    if isinstance(event, KeepWarmTimer) and state == S.SLEEPING:
        rec = _goto(rec, S.RESUMING, now, name, actions)
        actions += [ResumeInstance(), CancelTimer("sleep_ttl")]
        return replace(rec, keep_warm_probe=True), actions

    if isinstance(event, SleepTtlExpired) and state == S.SLEEPING:
        rec = _goto(rec, S.TERMINATED, now, name, actions)
        actions += [CancelTimer("keep_warm"), ReleaseInstance()]
        return rec, actions

    if isinstance(event, ConnectTimeout) and state in (S.STARTING, S.RESUMING) and rec.pending:
        limit = params.timing.connect_timeout
        expired = [p for p in rec.pending if now - p[1] >= limit]
        keep = tuple(p for p in rec.pending if now - p[1] < limit)
        for cid, _ in expired:
            actions.append(RejectConnection(cid, ADMISSION_TIMEOUT))
        if keep:
            actions.append(ScheduleTimer("connect_timeout", keep[0][1] + limit - now))
        return replace(rec, pending=keep), actions

    if isinstance(event, AppExited) and state == S.RUNNING:
        rec = _goto(rec, S.STOPPED, now, name, actions)
        rec = _reject_all(rec, HOST_STOPPED, actions)
        actions += [CancelTimer("idle_debounce"), ReleaseInstance(), ResetConnections()]
        return replace(rec, open_connections=0, external_connections=(), idle_since=None), actions

    if isinstance(event, Fault) and state in ALIVE:
        # connections queued on a resume are owed an instance, so the restart inherits them
        carry = state == S.RESUMING
        return _fail(rec, FAULT, now, name, actions, params, carry), actions

    if isinstance(event, AdminReset) and state in TERMINAL:
        rec = _goto(rec, S.UNALLOCATED, now, name, actions)
        return replace(rec, restart_count=0, keep_warm_probe=False, ttl_deadline=None), actions

    _trace(actions, "noop", event=name, state=state.value)
    return rec, actions
