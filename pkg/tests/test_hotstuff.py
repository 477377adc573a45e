import statistics

import pytest

from bftsim.engine import to_ms
from bftsim.network import WireMessage
from bftsim.protocols.core import Block
from bftsim.protocols.hotstuff import PendingProposal
from bftsim.runner import build_run, run_experiment

from util import count_tags, spec

FAST = {"bandwidthUp": "10 Gbit", "bandwidthDown": "10 Gbit",
        "latency": {"uniform": True, "replicas": "1 ms", "clients": "1 ms"}}


@pytest.mark.parametrize("n", [4, 7, 13])
def test_linear_message_pattern(n):
    s = spec("hotstuff", n=n, duration="4 s", client={"clients": 1, "outStandingPerClient": 1})
    ctx, *_ = build_run(s)
    counts = count_tags(ctx)
    ctx.sim.run_until(s.duration)
    # every round is one proposal fan-out and one vote fan-in through the leader
    assert counts["PROPOSAL"] == counts[("PROPOSAL", 0)]
    assert counts["PROPOSAL"] % (n - 1) == 0
    assert abs(counts["VOTE"] - counts["PROPOSAL"]) <= n - 1
    assert counts["NEW-VIEW"] == 0
    assert ctx.view_changes == 0


def test_duplicate_votes_are_counted_once():
    s = spec("hotstuff", n=4)
    ctx, *_ = build_run(s)
    leader = ctx.replicas[0]
    formed = []
    leader.form_qc = formed.append
    b = Block(height=1, view=0, proposer=0)
    leader.awaiting[b.uid] = PendingProposal(b)
    for src in (1, 1, 1, 2, 2):
        leader.on_vote(WireMessage(src, 0, 145, "VOTE", (0, 1, b.uid)))
    assert formed == []
    leader.on_vote(WireMessage(3, 0, 145, "VOTE", (0, 1, b.uid)))
    assert len(formed) == 1
    assert formed[0].voters == {1, 2, 3}


def test_fault_free_run_has_no_view_change():
    s = spec("hotstuff", n=7, duration="30 s")
    res = run_experiment(s)
    assert res.ctx.view_changes == 0
    assert res.metrics.safety_violations == 0
    assert res.metrics.steady_throughput > 0


def test_commit_interval_is_one_round_trip():
    s = spec("hotstuff", n=4, duration="3 s", network=FAST, replica={"blockSize": 100},
             client={"clients": 4, "outStandingPerClient": 300, "requestSize": 0})
    res = run_experiment(s)
    commits = sorted(r.commits[0] for r in res.ctx.log.heights.values() if 0 in r.commits)
    gaps = [to_ms(b - a) for a, b in zip(commits, commits[1:]) if a > 1e9]
    assert statistics.median(gaps) == pytest.approx(2.0, rel=0.05)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_leader_failover_is_safe(seed):
    s = spec("hotstuff", n=7, duration="20 s", replica={"timeout": 1000}, misc={"seed": seed},
             faults=[{"type": "crash", "target": "leader", "timestamp": "5 s"}])
    res = run_experiment(s)
    assert res.ctx.view_changes >= 1
    assert res.metrics.safety_violations == 0
    assert res.ctx.log.quorum_intersection_audit() == []
    late = [ops for t, ops in res.metrics.throughput_series if t >= 10]
    assert late and all(ops > 0 for ops in late)


def test_tail_blocks_continue_until_a_same_view_chain_commits():
    # a crash that interrupts the first chain leaves certified blocks of the old view;
    # the new leader must keep extending until its own three-chain commits them
    s = spec("kauri", n=10, duration="6 s", replica={"timeout": 300, "blockSize": 20},
             client={"clients": 2, "outStandingPerClient": 40},
             network={"bandwidthUp": "100 Mbit", "bandwidthDown": "100 Mbit",
                      "latency": {"uniform": True, "replicas": "19 ms", "clients": "2 ms"},
                      "packetLoss": 0.05},
             faults=[{"type": "crash", "target": [2], "timestamp": "251 ms"},
                     {"type": "crash", "target": "leader", "timestamp": "313 ms"}],
             misc={"seed": 437, "warmup": "0 s", "cooldown": "0 s"})
    res = run_experiment(s)
    assert res.metrics.safety_violations == 0
    assert res.metrics.total_committed_ops >= 80
    assert all(c.completed >= 40 for c in res.clients)
