"""Exhaustive bounded exploration of the host lifecycle.

Every event sequence up to a given length is applied from a representative
record of every state. Events that leave the record untouched and only emit
a noop are pruned, since any sequence through them equals a shorter one.
"""
from dataclasses import dataclass, field

from hostorch import lifecycle as lc
from hostorch.config import MS, SEC, KEEP_RUNNING, PREEMPTIBLE, warm_for
from hostorch.lifecycle import HostRecord, HostState, LifecycleParams, apply_event

# a short step keeps timers live; a long one lets connect timeouts expire
STEPS = (50 * MS, 4 * SEC)

ALPHABET = (lc.StartCompleted(), lc.StartFailed(), lc.ResumeCompleted(), lc.AppActive(),
            lc.AppIdle(), lc.IdleDebounceElapsed(), lc.KeepWarmTimer(), lc.SleepTtlExpired(),
            lc.ConnectTimeout(), lc.AppExited(), lc.Fault(), lc.AdminReset(), "connect")

POLICIES = (KEEP_RUNNING, PREEMPTIBLE, warm_for(SEC))


def seeds():
    """One record per state; the queuing states start with a connection waiting."""
    out = []
    for state in HostState:
        queued = ((1, 0),) if state in (HostState.STARTING, HostState.RESUMING) else ()
        alive = state not in (HostState.UNALLOCATED,)
        out.append(HostRecord("h", "10.0.0.1", instance_id=1 if alive else 0, state=state,
                              pending=queued, idle_since=0 if state == HostState.RUNNING else None))
    return out


@dataclass
class Report:
    sequences: int = 0
    pruned: int = 0
    violations: list = field(default_factory=list)


def explore(max_len=6, step=STEPS[0], policy=PREEMPTIBLE, apply=apply_event):
    report = Report()
    params = LifecycleParams(policy=policy, max_restarts=1)
    for seed in seeds():
        initial = {cid for cid, _ in seed.pending}
        _walk(seed, (), initial, {}, 1 + len(initial), max_len,
              lambda rec, ev, now: apply(rec, ev, now, params), step, report)
    return report


def _walk(rec, path, requested, outcomes, next_conn, budget, apply, step, report):
    report.sequences += 1
    _check(rec, path, requested, outcomes, report)
    if budget == 0:
        return
    now = (len(path) + 1) * step
    for ev in ALPHABET:
        conn = None
        if ev == "connect":
            conn, ev = next_conn, lc.ConnectRequested(next_conn)
        new, acts = apply(rec, ev, now)
        if new == rec and all(isinstance(a, lc.EmitTrace) and a.kind == "noop" for a in acts):
            report.pruned += 1
            continue
        seen = dict(outcomes)
        for a in acts:
            if isinstance(a, (lc.AdmitConnection, lc.RejectConnection)):
                if a.conn_id in seen:
                    report.violations.append((rec.state, path + (ev,), f"conn {a.conn_id} decided twice"))
                seen[a.conn_id] = type(a).__name__
        req = requested | {conn} if conn else requested
        _walk(new, path + (ev,), req, seen, next_conn + (conn is not None), budget - 1,
              apply, step, report)


def _check(rec, path, requested, outcomes, report):
    queued = {cid for cid, _ in rec.pending}
    if not queued.isdisjoint(outcomes):
        report.violations.append((rec.state, path, "decided but still queued"))
    if set(outcomes) - requested:
        report.violations.append((rec.state, path, "decided a connection never requested"))
    if queued | set(outcomes) != requested:
        report.violations.append((rec.state, path, "connection neither queued nor decided"))
    if rec.state not in (HostState.STARTING, HostState.RESUMING) and queued:
        report.violations.append((rec.state, path, "queue outlives the waiting states"))
