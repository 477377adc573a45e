import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bftsim.engine import seconds
from bftsim.network import ConfigError
from bftsim.runner import build_run, run_experiment
from bftsim.workload import (ClientSpec, FaultSpec, FaultType, resolve_crash_count,
                             select_crash_victims)

from util import spec


def test_client_spec_validation():
    assert ClientSpec(id=9, outstanding=5, payload_bytes=1, reply_quorum=2, overload=10).cap == 50
    with pytest.raises(ConfigError):
        ClientSpec(id=9, outstanding=0, payload_bytes=1, reply_quorum=2)
    with pytest.raises(ConfigError, match="overload"):
        FaultSpec(FaultType.DOS)
    with pytest.raises(ConfigError, match="threshold"):
        FaultSpec(FaultType.CRASH, threshold=1.2)


def test_zero_threshold_warns():
    plan = resolve_crash_count(FaultSpec(FaultType.CRASH, threshold=0.1), 4)
    assert plan.count == 0
    assert plan.warnings == ["threshold resolves to zero"]
    assert not plan.exceeds_resilience


def test_exceeding_resilience_is_flagged():
    assert resolve_crash_count(FaultSpec(FaultType.CRASH, threshold=0.5), 4).exceeds_resilience
    assert not resolve_crash_count(FaultSpec(FaultType.CRASH, threshold=0.3), 10).exceeds_resilience
    with pytest.raises(ConfigError, match="not a replica id"):
        resolve_crash_count(FaultSpec(FaultType.CRASH, target=[4]), 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(4, 200), st.floats(0, 1), st.integers(0, 10**6))
def test_victims_are_distinct_and_counted(n, threshold, seed):
    plan = resolve_crash_count(FaultSpec(FaultType.CRASH, threshold=threshold), n)
    victims = select_crash_victims(plan, n, 0, random.Random(seed))
    assert len(victims) == len(set(victims)) == int(threshold * n)
    assert all(0 <= v < n for v in victims)
    leader = select_crash_victims(resolve_crash_count(FaultSpec(FaultType.CRASH, target="leader"),
                                                      n), n, 3, random.Random(seed))
    assert leader == [3]


@pytest.mark.parametrize("protocol", ["pbft", "hotstuff", "kauri"])
def test_clients_never_exceed_their_cap(protocol):
    s = spec(protocol, n=7, duration="6 s", client={"clients": 3, "outStandingPerClient": 40})
    res = run_experiment(s)
    for c in res.clients:
        assert c.max_open == 40
        assert c.open_count <= 40
    assert sum(x.count for c in res.clients for x in c.samples) > 0


def test_crashed_replicas_stay_silent():
    s = spec("hotstuff", n=10, duration="8 s", replica={"timeout": 1000},
             faults=[{"type": "crash", "threshold": 0.3, "timestamp": "3 s"}])
    ctx, clients, attackers, crashed, *_ = build_run(s, record=True)
    ctx.sim.run_until(s.duration)
    victims = [v for _, v in crashed]
    assert len(victims) == 3
    assert all(ctx.replicas[v].crashed for v in victims)
    late = [r for r in ctx.net.transfers if r.src in victims and r.up_start >= seconds(3)]
    assert late == []


def test_attacker_runs_at_its_overloaded_cap():
    s = spec("pbft", n=4, duration="6 s", client={"clients": 2, "outStandingPerClient": 20},
             faults=[{"type": "dos", "timestamp": "1 s", "overload": 10}])
    res = run_experiment(s)
    (attacker,) = res.attackers
    assert attacker.spec.cap == 200
    assert attacker.max_open == 200
    assert attacker.samples and attacker.samples[0].completed_at > seconds(1)
    assert all(c.max_open == 20 for c in res.clients)
