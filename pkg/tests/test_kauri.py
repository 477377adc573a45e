import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bftsim.engine import ms
from bftsim.network import ConfigError
from bftsim.protocols.core import SigScheme, SignatureModel, SystemParams
from bftsim.protocols.kauri import (build_tree, default_fanout, default_stretch, distinct_bins,
                                   tree_depth)
from bftsim.runner import build_run, run_experiment

from util import count_tags, spec


def test_seven_node_binary_tree():
    t = build_tree(7, 2, 0)
    assert t.levels == [[0], [1, 2], [3, 4, 5, 6]]
    assert t.children[1] == [3, 5]
    assert t.children[2] == [4, 6]
    assert sorted(t.leaves) == [3, 4, 5, 6]
    assert t.depth == 2


def test_hundred_nodes_fanout_ten():
    assert default_fanout(100) == 10
    t = build_tree(100, 10, 0)
    assert [len(l) for l in t.levels] == [1, 10, 89]
    assert sorted(len(t.children[v]) for v in t.levels[1]) == [8] + [9] * 9


def test_root_follows_the_leader():
    t = build_tree(7, 2, 5)
    assert t.root == 5
    assert t.levels[1] == [6, 0]
    assert sorted(t.subtree(5)) == list(range(7))


def test_bad_fanout():
    with pytest.raises(ConfigError):
        build_tree(4, 4, 0)
    with pytest.raises(ConfigError):
        build_tree(4, 1, 0)


def test_bins_use_fresh_internal_nodes():
    a, b = build_tree(100, 10, 0, 0), build_tree(100, 10, 0, 1)
    assert (a.internal - {0}).isdisjoint(b.internal - {0})


@settings(max_examples=150, deadline=None)
@given(st.integers(3, 500), st.data())
def test_tree_shape(n, data):
    m = data.draw(st.integers(2, n - 1))
    leader = data.draw(st.integers(0, n - 1))
    b = data.draw(st.integers(0, 5))
    t = build_tree(n, m, leader, b)
    nodes = [v for level in t.levels for v in level]
    assert sorted(nodes) == list(range(n))
    assert t.root == leader and t.parent[leader] is None
    assert t.depth == tree_depth(n, m)
    for v, kids in t.children.items():
        assert len(kids) <= m
        assert all(t.parent[c] == v for c in kids)


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 1000), st.integers(1, 10_000), st.integers(1, 300),
       st.sampled_from([10**6, 25 * 10**6, 10**9, 10**10]))
def test_stretch_is_at_least_one(n, block, lat_ms, bw):
    p = SystemParams(n, block_size=block, sig=SignatureModel(SigScheme.BLS))
    assert default_stretch(n, default_fanout(n), p, bw, ms(lat_ms)) >= 1


@pytest.mark.parametrize("n", [13, 31])
def test_root_sends_fanout_copies(n):
    s = spec("kauri", n=n, duration="4 s")
    ctx, *_ = build_run(s)
    counts = count_tags(ctx)
    ctx.sim.run_until(s.duration)
    m = default_fanout(n)
    root = counts[("PROPOSAL", 0)]
    assert root > 0 and root % m == 0
    # the rest of the dissemination is relayed by internal nodes
    assert counts["PROPOSAL"] * m == root * (n - 1)


def test_aggregate_size_does_not_grow_with_children():
    s = spec("kauri", n=31, duration="3 s")
    ctx, *_ = build_run(s)
    sizes = set()
    send = ctx.net.send

    def spy(msg):
        if msg.tag == "AGG":
            sizes.add(msg.size_bytes)
        return send(msg)

    ctx.net.send = spy
    ctx.sim.run_until(s.duration)
    assert sizes == {SignatureModel(SigScheme.BLS).aggregate_bytes(31)}


def test_leaf_crash_needs_no_reconfiguration():
    s = spec("kauri", n=7, duration="10 s", replica={"timeout": 1000, "fanout": 2},
             faults=[{"type": "crash", "target": [6], "timestamp": "2 s"}])
    res = run_experiment(s)
    assert res.ctx.reconfigurations == 0
    assert res.metrics.safety_violations == 0


def test_internal_crash_costs_one_round():
    s = spec("kauri", n=7, duration="10 s", replica={"timeout": 1000, "fanout": 2},
             faults=[{"type": "crash", "target": [1], "timestamp": "2 s"}])
    res = run_experiment(s)
    assert res.ctx.reconfigurations == 1
    assert res.ctx.replicas[0].failed_rounds == 1
    assert res.ctx.view_changes == 0
    assert res.metrics.safety_violations == 0
    late = [ops for t, ops in res.metrics.throughput_series if t >= 5]
    assert late and all(ops > 0 for ops in late)


def test_distinct_bins():
    assert distinct_bins(100, 10) == 9
    assert distinct_bins(7, 3) == 2
    assert distinct_bins(4, 3) == 1


def test_star_fallback_once_every_bin_has_a_crashed_internal():
    # with n=7, m=3 the two bins use internals {1,2,3} and {4,5,6}
    s = spec("kauri", n=7, duration="10 s", replica={"timeout": 500},
             faults=[{"type": "crash", "target": [3, 5], "timestamp": "2 s"}])
    res = run_experiment(s)
    assert res.ctx.reconfigurations == 2
    assert res.ctx.view_changes == 0
    assert res.metrics.safety_violations == 0
    late = [ops for t, ops in res.metrics.throughput_series if t >= 4]
    assert late and all(ops > 0 for ops in late)
