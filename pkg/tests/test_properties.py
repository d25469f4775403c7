"""Simulator-wide invariants over random scenarios."""
from hypothesis import given, settings
from hypothesis import strategies as st

from hostorch.config import TimingParams
from hostorch.metrics import compute_metrics
from hostorch.sim import run_scenario
from scenario_gen import random_scenario

T = TimingParams()

runs = st.builds(lambda gen, seed: (random_scenario(gen, hosts=10, stimuli=80, span_ms=20_000), seed),
                 st.integers(0, 10**6), st.integers(0, 10**6))


@settings(max_examples=25, deadline=None)
@given(runs)
def test_simulator_invariants(run):
    (cfg, scn), seed = run
    recs = run_scenario(cfg, scn, seed=seed)
    # no connection ever waits longer than one cold start for admission
    for r in recs:
        if r.kind == "admit":
            assert int(r.get("waited")) <= T.cold_start_latency
    # a host keeps its address across every instance
    addresses = {}
    for r in recs:
        if r.kind == "backend" and r.get("op") == "start":
            assert addresses.setdefault(r.host, r.get("address")) == r.get("address")
    assert len(set(addresses.values())) == len(addresses)
    m = compute_metrics(recs)
    assert m.total_running_us <= m.baseline_us
    if any(h.suspensions for h in m.hosts.values()):
        assert m.total_running_us < m.baseline_us
    # instance ids only grow, by one per start
    for host in addresses:
        insts = [r.inst for r in recs if r.kind == "backend" and r.get("op") == "start" and r.host == host]
        assert insts == list(range(1, len(insts) + 1))
