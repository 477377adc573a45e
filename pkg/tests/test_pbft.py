import pytest

from bftsim.engine import to_ms
from bftsim.runner import build_run, run_experiment

from util import count_tags, spec

WAN50 = {"bandwidthUp": "1 Gbit", "bandwidthDown": "1 Gbit",
         "latency": {"uniform": True, "replicas": "50 ms", "clients": "50 ms"}}
ONE = {"clients": 1, "outStandingPerClient": 1}


@pytest.mark.parametrize("n", [4, 7, 10])
def test_message_pattern_per_height(n):
    s = spec("pbft", n=n, duration="4 s", client=ONE)
    ctx, *_ = build_run(s)
    counts = count_tags(ctx)
    ctx.sim.run_until(s.duration)
    h = len(ctx.log.heights)
    assert h > 20
    # at most one height is still in flight when the run stops
    assert 0 <= counts["PRE-PREPARE"] - (n - 1) * h <= n - 1
    votes = counts["PREPARE"] + counts["COMMIT"]
    assert 0 <= votes - 2 * n * (n - 1) * h <= 2 * n * (n - 1)
    assert counts["VIEW-CHANGE"] == counts["NEW-VIEW"] == 0


def test_single_request_latency_is_five_one_way_delays():
    s = spec("pbft", n=4, duration="2 s", network=WAN50, client={**ONE, "requestSize": 0},
             replica={"blockSize": 1})
    res = run_experiment(s)
    first = res.clients[0].samples[0]
    assert to_ms(first.latency) == pytest.approx(250, abs=0.1)
    rec = res.ctx.log.heights[1]
    assert to_ms(rec.first_commit - rec.proposed_at) == pytest.approx(150, abs=0.1)


def test_long_fault_free_run_is_safe_and_gapless():
    s = spec("pbft", n=4, duration="120 s", client={"clients": 2, "outStandingPerClient": 50})
    res = run_experiment(s)
    log = res.ctx.log
    assert res.metrics.safety_violations == 0
    assert sorted(log.heights) == list(range(1, len(log.heights) + 1))
    assert all(len(r.commits) == 4 for h, r in log.heights.items() if h < len(log.heights) - 5)
    assert res.ctx.view_changes == 0


def test_leader_crash_triggers_one_view_change_and_recovers():
    s = spec("pbft", n=8, duration="20 s", replica={"timeout": 1000},
             faults=[{"type": "crash", "target": "leader", "timestamp": "5 s"}])
    res = run_experiment(s)
    assert [v for _, v in res.crashed] == [0]
    assert res.ctx.view_changes >= 1
    assert res.metrics.safety_violations == 0
    late = [ops for t, ops in res.metrics.throughput_series if t >= 10]
    assert late and all(ops > 0 for ops in late)


def test_follower_crash_causes_no_view_change():
    s = spec("pbft", n=7, duration="10 s", replica={"timeout": 1000},
             faults=[{"type": "crash", "target": [3, 5], "timestamp": "2 s"}])
    res = run_experiment(s)
    assert res.ctx.view_changes == 0
    assert res.metrics.safety_violations == 0
    assert all(ops > 0 for t, ops in res.metrics.throughput_series if 3 <= t < 10)


def test_throughput_bounded_by_leader_uplink():
    # each op is carried to n-1 followers inline, so the leader uplink caps throughput
    net = {"bandwidthUp": "10 Mbit", "bandwidthDown": "1 Gbit",
           "latency": {"uniform": True, "replicas": "5 ms", "clients": "5 ms"}}
    s = spec("pbft", n=4, duration="20 s", network=net, replica={"blockSize": 100},
             client={"clients": 4, "outStandingPerClient": 400, "requestSize": 1000})
    res = run_experiment(s)
    cap = 10e6 / 8 / (3 * 1000)
    assert res.metrics.steady_throughput <= cap
    assert res.metrics.steady_throughput >= 0.5 * cap
    assert res.metrics.steady_throughput == pytest.approx(
        res.metrics.total_committed_ops / 20, rel=0.5)
