import itertools
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hostorch import lifecycle as lc
from hostorch.config import MS, SEC, KEEP_RUNNING, PREEMPTIBLE, ExternalConnPolicy, TimingParams, warm_for
from hostorch.lifecycle import Admission, HostRecord, HostState, LifecycleParams, apply_event

S = HostState
T = TimingParams()
P = LifecycleParams()


def kinds(actions, cls):
    return [a for a in actions if isinstance(a, cls)]


def states(actions):
    return [dict(a.details)["to"] for a in actions if isinstance(a, lc.EmitTrace) and a.kind == "state"]


def run(rec, *events, params=P, step=0):
    """Apply events at t = rec.state_entered_at + i*step; collect every action."""
    out = []
    now = rec.state_entered_at
    for ev in events:
        rec, acts = apply_event(rec, ev, now, params)
        out += acts
        now += step
    return rec, out


def running(**kw):
    base = dict(hostname="h", address="10.0.0.1", instance_id=1, state=S.RUNNING)
    base.update(kw)
    return HostRecord(**base)


@pytest.mark.parametrize("state,resolvable,expected", [
    (S.RUNNING, True, Admission.PROCEED),
    (S.SLEEPING, True, Admission.RESUME_THEN_PROCEED),
    (S.TERMINATED, True, Admission.FAIL),
    (S.UNALLOCATED, True, Admission.INSTANTIATE_THEN_PROCEED),
    (S.UNALLOCATED, False, Admission.FAIL),
    (S.STARTING, True, Admission.INSTANTIATE_THEN_PROCEED),
    (S.RESUMING, True, Admission.RESUME_THEN_PROCEED),
    (S.STOPPED, True, Admission.FAIL),
])
def test_admission_table(state, resolvable, expected):
    assert lc.admit_connection(state, resolvable) == expected


def test_cold_start_queues_then_admits():
    rec = HostRecord("h", "10.0.0.1")
    rec, acts = apply_event(rec, lc.ConnectRequested(7), 0)
    assert rec.state == S.STARTING and rec.instance_id == 1
    assert kinds(acts, lc.StartInstance)
    assert lc.ScheduleTimer("connect_timeout", T.connect_timeout) in acts
    rec, acts = apply_event(rec, lc.ConnectRequested(8), 50 * MS)
    assert rec.pending == ((7, 0), (8, 50 * MS))
    rec, acts = apply_event(rec, lc.StartCompleted(), 200 * MS)
    assert rec.state == S.RUNNING and rec.pending == ()
    assert kinds(acts, lc.AdmitConnection) == [lc.AdmitConnection(7, 200 * MS),
                                               lc.AdmitConnection(8, 150 * MS)]
    assert lc.CancelTimer("connect_timeout") in acts


def test_idle_suspend_and_resume():
    rec, acts = run(running(), lc.AppIdle())
    assert rec.idle_since == 0
    assert lc.ScheduleTimer("idle_debounce", T.idle_debounce) in acts
    rec, acts = apply_event(rec, lc.IdleDebounceElapsed(), T.idle_debounce)
    assert rec.state == S.SLEEPING
    assert kinds(acts, lc.SuspendInstance) == [lc.SuspendInstance(())]
    assert lc.ScheduleTimer("keep_warm", T.keep_warm_period) in acts
    assert lc.ScheduleTimer("sleep_ttl", T.sleep_ttl) in acts
    assert rec.ttl_deadline == T.idle_debounce + T.sleep_ttl

    rec, acts = apply_event(rec, lc.ConnectRequested(3), SEC)
    assert rec.state == S.RESUMING and kinds(acts, lc.ResumeInstance)
    assert {lc.CancelTimer("keep_warm"), lc.CancelTimer("sleep_ttl")} <= set(acts)
    rec, acts = apply_event(rec, lc.ResumeCompleted(), SEC + T.resume_latency)
    assert rec.state == S.RUNNING
    assert kinds(acts, lc.AdmitConnection) == [lc.AdmitConnection(3, T.resume_latency)]
    # still idle, so the debounce starts over
    assert lc.ScheduleTimer("idle_debounce", T.idle_debounce) in acts


def test_activity_cancels_debounce():
    rec, _ = run(running(), lc.AppIdle())
    rec, acts = apply_event(rec, lc.AppActive(), 10)
    assert rec.idle_since is None and lc.CancelTimer("idle_debounce") in acts
    rec, acts = apply_event(rec, lc.IdleDebounceElapsed(), 20)
    assert rec.state == S.RUNNING and [a.kind for a in acts] == ["noop"]


def test_open_connections_block_suspension():
    rec, acts = run(running(open_connections=2, idle_since=0), lc.IdleDebounceElapsed())
    assert rec.state == S.RUNNING
    assert dict(acts[0].details) == {"reason": "connections", "open": "2"}


def test_keep_warm_probe_keeps_original_ttl():
    rec, _ = run(running(idle_since=0), lc.IdleDebounceElapsed())
    deadline = rec.ttl_deadline
    t = T.keep_warm_period
    rec, acts = apply_event(rec, lc.KeepWarmTimer(), t)
    assert rec.state == S.RESUMING and rec.keep_warm_probe
    rec, _ = apply_event(rec, lc.ResumeCompleted(), t + T.resume_latency)
    t2 = t + T.resume_latency + T.idle_debounce
    rec, acts = apply_event(rec, lc.IdleDebounceElapsed(), t2)
    assert rec.state == S.SLEEPING and rec.ttl_deadline == deadline
    assert lc.ScheduleTimer("sleep_ttl", deadline - t2) in acts


def test_no_keep_warm_past_ttl():
    params = LifecycleParams(timing=TimingParams(keep_warm_period=60 * SEC, sleep_ttl=100 * SEC))
    rec = running(idle_since=0, keep_warm_probe=True, ttl_deadline=50 * SEC)
    rec, acts = apply_event(rec, lc.IdleDebounceElapsed(), 10 * SEC, params)
    assert not [a for a in acts if isinstance(a, lc.ScheduleTimer) and a.kind == "keep_warm"]
    assert lc.ScheduleTimer("sleep_ttl", 40 * SEC) in acts


def test_sleep_ttl_terminates():
    rec = running(state=S.SLEEPING)
    rec, acts = apply_event(rec, lc.SleepTtlExpired(), 5)
    assert rec.state == S.TERMINATED and kinds(acts, lc.ReleaseInstance)
    rec, acts = apply_event(rec, lc.ConnectRequested(1), 6)
    assert kinds(acts, lc.RejectConnection) == [lc.RejectConnection(1, lc.HOST_TERMINATED)]


def test_fault_restarts_with_new_instance_same_address():
    rec, acts = run(running(), lc.Fault())
    assert rec.state == S.STARTING
    assert rec.instance_id == 2 and rec.address == "10.0.0.1" and rec.restart_count == 1
    assert states(acts) == ["failed", "starting"]
    order = [type(a).__name__ for a in acts if not isinstance(a, (lc.EmitTrace, lc.CancelTimer))]
    assert order == ["ReleaseInstance", "ResetConnections", "StartInstance"]


def test_restart_budget_then_terminated_until_reset():
    params = LifecycleParams(max_restarts=2)
    rec = running()
    rec, _ = run(rec, lc.Fault(), lc.StartFailed(), lc.Fault(), params=params)
    assert rec.state == S.TERMINATED and rec.restart_count == 2
    rec, acts = apply_event(rec, lc.AdminReset(), 1, params)
    assert rec.state == S.UNALLOCATED and rec.restart_count == 0
    rec, _ = apply_event(rec, lc.ConnectRequested(1), 2, params)
    assert rec.state == S.STARTING and rec.instance_id == 4


def test_start_failure_rejects_queue():
    rec, _ = apply_event(HostRecord("h"), lc.ConnectRequested(1), 0)
    rec, acts = apply_event(rec, lc.StartFailed("spawn"), 10, LifecycleParams(max_restarts=0))
    assert rec.state == S.TERMINATED
    assert kinds(acts, lc.RejectConnection) == [lc.RejectConnection(1, "spawn")]


def test_app_exit_stops():
    rec, acts = run(running(), lc.AppExited())
    assert rec.state == S.STOPPED and kinds(acts, lc.ResetConnections)
    rec, acts = apply_event(rec, lc.ConnectRequested(9), 1)
    assert kinds(acts, lc.RejectConnection)[0].reason == lc.HOST_STOPPED


def test_connect_timeout_rejects_only_expired():
    rec = HostRecord("h", state=S.STARTING, pending=((1, 0), (2, 3 * SEC)))
    rec, acts = apply_event(rec, lc.ConnectTimeout(), T.connect_timeout)
    assert kinds(acts, lc.RejectConnection) == [lc.RejectConnection(1, lc.ADMISSION_TIMEOUT)]
    assert rec.pending == ((2, 3 * SEC),)
    assert lc.ScheduleTimer("connect_timeout", 3 * SEC) in acts


def test_queue_capacity():
    params = LifecycleParams(queue_capacity=1)
    rec, _ = apply_event(HostRecord("h"), lc.ConnectRequested(1), 0, params)
    rec, acts = apply_event(rec, lc.ConnectRequested(2), 0, params)
    assert kinds(acts, lc.RejectConnection) == [lc.RejectConnection(2, lc.QUEUE_FULL)]


def _idle_with_external(policy, roles, idle_since=0):
    ext = tuple((i, r) for i, r in enumerate(roles, start=10))
    return running(idle_since=idle_since, external_connections=ext), LifecycleParams(policy=policy)


def test_keep_running_blocks_external():
    rec, params = _idle_with_external(KEEP_RUNNING, ["active"])
    rec, acts = apply_event(rec, lc.IdleDebounceElapsed(), SEC, params)
    assert rec.state == S.RUNNING and acts[0].kind == "blocked"


def test_preemptible_marks_lost():
    rec, params = _idle_with_external(PREEMPTIBLE, ["active", "passive"])
    rec, acts = apply_event(rec, lc.IdleDebounceElapsed(), SEC, params)
    assert rec.state == S.SLEEPING
    assert kinds(acts, lc.SuspendInstance) == [lc.SuspendInstance((10, 11))]
    assert rec.external_connections == ()


def test_warm_for_waits_then_suspends():
    rec, params = _idle_with_external(warm_for(5 * SEC), ["passive"], idle_since=SEC)
    rec, acts = apply_event(rec, lc.IdleDebounceElapsed(), 2 * SEC, params)
    assert rec.state == S.RUNNING
    assert lc.ScheduleTimer("idle_debounce", 4 * SEC) in acts
    rec, acts = apply_event(rec, lc.IdleDebounceElapsed(), 6 * SEC, params)
    assert rec.state == S.SLEEPING


def test_role_distinction():
    policy = ExternalConnPolicy("preemptible", None, True)
    rec, params = _idle_with_external(policy, ["passive"])
    assert apply_event(rec, lc.IdleDebounceElapsed(), SEC, params)[0].state == S.RUNNING
    rec, params = _idle_with_external(policy, ["active"])
    assert apply_event(rec, lc.IdleDebounceElapsed(), SEC, params)[0].state == S.SLEEPING


def test_policy_gate_table():
    gate = lc.external_policy_gate
    rec = running(idle_since=0, external_connections=((1, "active"),))
    assert gate(replace(rec, external_connections=()), KEEP_RUNNING, 0)
    assert not gate(rec, KEEP_RUNNING, 10**9)
    assert gate(rec, PREEMPTIBLE, 0)
    assert not gate(rec, warm_for(SEC), SEC - 1)
    assert gate(rec, warm_for(SEC), SEC)


def test_unknown_pairs_are_noops():
    rec = HostRecord("h")
    for ev in (lc.StartCompleted(), lc.ResumeCompleted(), lc.AppIdle(), lc.KeepWarmTimer(),
               lc.SleepTtlExpired(), lc.Fault(), lc.AdminReset()):
        new, acts = apply_event(rec, ev, 0)
        assert new == rec
        assert [a.kind for a in acts] == ["noop"]


EVENTS = [lc.StartCompleted(), lc.StartFailed(), lc.ResumeCompleted(), lc.AppActive(), lc.AppIdle(),
          lc.IdleDebounceElapsed(), lc.KeepWarmTimer(), lc.SleepTtlExpired(), lc.ConnectTimeout(),
          lc.AppExited(), lc.Fault(), lc.AdminReset(), "connect"]


@settings(max_examples=400)
@given(st.lists(st.sampled_from(EVENTS), max_size=30),
       st.lists(st.integers(min_value=0, max_value=3 * SEC), min_size=30, max_size=30),
       st.sampled_from([KEEP_RUNNING, PREEMPTIBLE, warm_for(2 * SEC)]))
def test_random_sequences_keep_invariants(events, gaps, policy):
    params = LifecycleParams(policy=policy, max_restarts=2)
    rec = HostRecord("h", "10.0.0.1")
    now, next_conn = 0, 1
    outcomes = {}
    for ev, gap in zip(events, gaps):
        now += gap
        if ev == "connect":
            ev = lc.ConnectRequested(next_conn)
            next_conn += 1
        old = rec
        rec, acts = apply_event(rec, ev, now, params)
        entered_starting = "starting" in states(acts)
        assert rec.instance_id == old.instance_id + (1 if entered_starting else 0)
        assert rec.address == old.address
        assert rec.restart_count <= params.max_restarts
        for a in acts:
            if isinstance(a, (lc.AdmitConnection, lc.RejectConnection)):
                assert a.conn_id not in outcomes
                outcomes[a.conn_id] = a
        if rec.state in (S.RUNNING, S.SLEEPING) or rec.state in lc.TERMINAL:
            assert rec.pending == ()
        if rec.state == S.SLEEPING:
            assert rec.open_connections == 0 and rec.external_connections == ()
    queued = {cid for cid, _ in rec.pending}
    assert queued.isdisjoint(outcomes)
    assert queued | set(outcomes) == set(range(1, next_conn))


def test_apply_event_is_pure():
    rec = running(idle_since=0)
    a = apply_event(rec, lc.IdleDebounceElapsed(), 10)
    b = apply_event(rec, lc.IdleDebounceElapsed(), 10)
    assert a == b
    assert rec == running(idle_since=0)


def test_every_pair_is_defined():
    for state, ev in itertools.product(S, EVENTS[:-1] + [lc.ConnectRequested(1)]):
        rec = HostRecord("h", state=state, idle_since=0)
        new, acts = apply_event(rec, ev, 0)
        assert isinstance(new, HostRecord)
        assert all(type(a).__module__ == lc.__name__ for a in acts)


def test_resume_fault_hands_queue_to_restart():
    rec = running(state=S.SLEEPING)
    rec, _ = apply_event(rec, lc.ConnectRequested(4), 0)
    rec, acts = apply_event(rec, lc.Fault(), 5)
    assert rec.state == S.STARTING and rec.pending == ((4, 0),)
    assert not kinds(acts, lc.RejectConnection)
    rec, acts = apply_event(rec, lc.StartCompleted(), 205)
    assert kinds(acts, lc.AdmitConnection) == [lc.AdmitConnection(4, 205)]
    # without a restart left the queue is rejected
    rec = running(state=S.RESUMING, pending=((4, 0),), restart_count=3)
    rec, acts = apply_event(rec, lc.Fault(), 5)
    assert rec.state == S.TERMINATED
    assert kinds(acts, lc.RejectConnection) == [lc.RejectConnection(4, lc.FAULT)]
