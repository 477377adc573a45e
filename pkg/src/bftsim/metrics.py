"""Throughput series, latency summaries and run flags computed from a finished run."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .engine import NS_PER_S, to_ms
from .protocols.core import CommitLog


@dataclass
class LatencyStats:
    count: int = 0
    mean_ms: float = 0.0
    p50_ms: float = 0.0
    p95_ms: float = 0.0

    @classmethod
    def from_weighted(cls, samples: list[tuple[int, int]]) -> "LatencyStats":
        """``samples`` are ``(latency_ns, weight)`` pairs; percentiles use nearest rank."""
        total = sum(w for _, w in samples)
        if total == 0:
            return cls()
        mean = sum(v * w for v, w in samples) / total
        return cls(count=total, mean_ms=to_ms(mean),
                   p50_ms=to_ms(nearest_rank(samples, 50, total)),
                   p95_ms=to_ms(nearest_rank(samples, 95, total)))


def nearest_rank(samples: list[tuple[int, int]], pct: float, total: int | None = None) -> int:
    """Smallest value whose cumulative weight reaches ``ceil(pct/100 * total)``."""
    if total is None:
        total = sum(w for _, w in samples)
    if total == 0:
        raise ValueError("no samples")
    rank = max(1, math.ceil(pct / 100.0 * total))
    seen = 0
    for v, w in sorted(samples):
        seen += w
        if seen >= rank:
            return v
    return max(v for v, _ in samples)


@dataclass
class MetricsReport:
    throughput_series: list = field(default_factory=list)  # (second, committed ops)
    steady_throughput: float = 0.0
    total_committed_ops: int = 0
    consensus_latency: LatencyStats = field(default_factory=LatencyStats)
    decision_latency: LatencyStats = field(default_factory=LatencyStats)
    request_latency: LatencyStats = field(default_factory=LatencyStats)
    request_commit_latency: LatencyStats = field(default_factory=LatencyStats)
    attacker_latency: LatencyStats = field(default_factory=LatencyStats)
    sent_msgs: list = field(default_factory=list)
    sent_bytes: list = field(default_factory=list)
    starved: bool = False
    exceeds_resilience: bool = False
    safety_violations: int = 0
    view_changes: int = 0
    reconfigurations: int = 0
    warnings: list = field(default_factory=list)


def throughput_series(log: CommitLog, duration: int) -> list[tuple[int, int]]:
    """Committed ops per one-second bucket, counted when a height first commits."""
    buckets = [0] * max(1, math.ceil(duration / NS_PER_S))
    for rec in log.heights.values():
        i = min(rec.first_commit // NS_PER_S, len(buckets) - 1)
        buckets[i] += rec.n_ops
    return list(enumerate(buckets))


def steady_throughput(log: CommitLog, start: int, end: int) -> float:
    if end <= start:
        return 0.0
    ops = sum(r.n_ops for r in log.heights.values() if start <= r.first_commit < end)
    return ops * NS_PER_S / (end - start)


def compute_metrics(log: CommitLog, duration: int, warmup: int, cooldown: int,
                    normal_samples: list, attacker_samples: list | None = None) -> MetricsReport:
    start, end = warmup, duration - cooldown
    rep = MetricsReport()
    rep.throughput_series = throughput_series(log, duration)
    rep.total_committed_ops = log.committed_ops()
    rep.steady_throughput = steady_throughput(log, start, end)
    rep.starved = rep.total_committed_ops == 0
    rep.safety_violations = len(log.safety_audit())

    quorum_rank = log.t + 1
    consensus, decision, commit_lat = [], [], []
    for rec in log.heights.values():
        if not start <= rec.first_commit < end:
            continue
        at_leader = rec.commits.get(rec.proposer, rec.first_commit)
        consensus.append((at_leader - rec.proposed_at, 1))
        if rec.certified_at >= 0:
            decision.append((rec.certified_at - rec.proposed_at, 1))
        if rec.slices and len(rec.commits) >= quorum_rank:
            done = sorted(rec.commits.values())[quorum_rank - 1]
            for s in rec.slices:
                commit_lat.append((done - s.submitted_at, s.count))
    rep.consensus_latency = LatencyStats.from_weighted(consensus)
    rep.decision_latency = LatencyStats.from_weighted(decision)
    rep.request_commit_latency = LatencyStats.from_weighted(commit_lat)

    def windowed(samples):
        return [(s.latency, s.count) for s in samples if start <= s.completed_at < end]

    rep.request_latency = LatencyStats.from_weighted(windowed(normal_samples))
    rep.attacker_latency = LatencyStats.from_weighted(windowed(attacker_samples or []))
    return rep
