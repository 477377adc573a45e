import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bftsim.engine import ms, seconds
from bftsim.metrics import LatencyStats, compute_metrics, nearest_rank, throughput_series
from bftsim.protocols.core import Block, CommitLog, OpSlice
from bftsim.workload import LatencySample


def _commit(log, height, ops, proposed, committed, replicas=(0,)):
    b = Block(height=height, view=0, proposer=0, slices=(OpSlice(0, 0, ops, proposed),),
              proposed_at=proposed)
    for r in replicas:
        log.record_commit(height, b, r, committed)


def test_nearest_rank_examples():
    vals = [(v, 1) for v in range(1, 11)]
    assert nearest_rank(vals, 50) == 5
    assert nearest_rank(vals, 95) == 10
    assert nearest_rank(vals, 0) == 1
    assert nearest_rank([(7, 3), (1, 1)], 50) == 7
    with pytest.raises(ValueError):
        nearest_rank([], 50)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**6), st.integers(1, 5)), min_size=1, max_size=50),
       st.integers(1, 100))
def test_nearest_rank_matches_expanded_list(samples, pct):
    flat = sorted(v for v, w in samples for _ in range(w))
    assert nearest_rank(samples, pct) == flat[math.ceil(pct / 100 * len(flat)) - 1]


def test_steady_throughput_arithmetic():
    log = CommitLog(4, 1)
    for i in range(1000):
        at = seconds(10) + i * ms(100)
        _commit(log, i + 1, 100, at - ms(50), at)
    m = compute_metrics(log, seconds(120), seconds(10), seconds(10), [])
    assert m.total_committed_ops == 100_000
    assert m.steady_throughput == pytest.approx(1000.0)
    assert m.consensus_latency.p50_ms == pytest.approx(50.0)
    assert not m.starved


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30_000), st.integers(0, 500)), max_size=60),
       st.integers(1, 30))
def test_series_sums_to_total(commits, dur_s):
    log = CommitLog(4, 1)
    for h, (at_ms, ops) in enumerate(commits, start=1):
        _commit(log, h, ops, 0, ms(min(at_ms, dur_s * 1000 - 1)))
    series = throughput_series(log, seconds(dur_s))
    assert len(series) == dur_s
    assert sum(ops for _, ops in series) == log.committed_ops()


def test_single_bucket_latency():
    log = CommitLog(4, 1)
    _commit(log, 1, 10, seconds(5), seconds(5) + ms(42))
    m = compute_metrics(log, seconds(20), seconds(1), seconds(1), [])
    assert m.consensus_latency.p50_ms == pytest.approx(42.0)
    assert [ops for _, ops in m.throughput_series if ops] == [10]


def test_starved_run():
    m = compute_metrics(CommitLog(4, 1), seconds(20), seconds(1), seconds(1), [])
    assert m.starved and m.steady_throughput == 0.0
    assert m.request_latency == LatencyStats()


def test_request_and_commit_latency_are_separate():
    log = CommitLog(4, 1)
    # commits at replicas 0..3 at 10, 20, 30, 40 ms; t+1 = 2 commits reached at 20 ms
    b = Block(height=1, view=0, proposer=0, slices=(OpSlice(9, 0, 5, seconds(2)),),
              proposed_at=seconds(2) + ms(5))
    for r in range(4):
        log.record_commit(1, b, r, seconds(2) + ms(10 * (r + 1)))
    client = [LatencySample(seconds(2) + ms(30), ms(30), 5),
              LatencySample(seconds(19), ms(999), 1)]  # inside the cooldown, ignored
    m = compute_metrics(log, seconds(20), seconds(1), seconds(1), client)
    assert m.request_commit_latency.mean_ms == pytest.approx(20.0)
    assert m.request_commit_latency.count == 5
    assert m.request_latency.mean_ms == pytest.approx(30.0)
    assert m.consensus_latency.mean_ms == pytest.approx(5.0)
