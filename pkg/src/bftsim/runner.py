"""Builds one simulated deployment from an ExperimentSpec, runs it, and writes its outputs."""

from __future__ import annotations

import csv
import io
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .edf import ExperimentSpec, dump_resolved
from .engine import Simulator, to_ms
from .metrics import MetricsReport, compute_metrics
from .network import Network, build_topology
from .protocols.core import RunContext
from .protocols.hotstuff import HotStuffReplica
from .protocols.kauri import KauriReplica, build_tree, default_fanout, default_stretch
from .protocols.pbft import PbftReplica
from .workload import (Client, ClientSpec, FaultType, inject_crash, resolve_crash_count)

log = logging.getLogger(__name__)

SCHEMA_LINE = "# bft-netsim schema v1"


@dataclass
class RunResult:
    spec: ExperimentSpec
    metrics: MetricsReport
    trace_hash: str
    ctx: RunContext
    clients: list
    attackers: list
    crashed: list = field(default_factory=list)
    events: int = 0
    stretch: int = 1
    fanout: int = 0


def auto_outstanding(spec: ExperimentSpec, depth: int) -> int:
    """Per-client in-flight ops so the clients together keep two blocks per pipeline slot."""
    total = 2 * spec.params.block_size * depth
    return max(1, math.ceil(total / spec.client.clients))


def _kauri_shape(spec: ExperimentSpec, topo) -> tuple[int, int]:
    n = spec.params.n
    m = spec.fanout or default_fanout(n)
    if spec.stretch:
        return m, spec.stretch
    tree = build_tree(n, m, 0)
    worst = max(topo.latency_ns(v, c) for v, kids in tree.children.items() for c in kids)
    return m, default_stretch(n, m, spec.params, spec.network.bandwidth_up_bps, worst)


def build_run(spec: ExperimentSpec, record: bool = False):
    p = spec.params
    dos = [f for f in spec.faults if f.type == FaultType.DOS]
    n_clients = spec.client.clients + len(dos)
    net_spec = spec.network
    if dos and net_spec.client_regions is not None:
        # attackers sit in the first client region
        regions = list(net_spec.client_regions)
        regions[0] = (regions[0][0], regions[0][1] + len(dos))
        net_spec = replace(net_spec, client_regions=regions)
    topo = build_topology(net_spec, p.n, n_clients)
    sim = Simulator(seed=spec.seed)
    net = Network(sim, topo, record=record)
    client_ids = list(range(p.n, p.n + n_clients))
    ctx = RunContext(sim, net, p, client_ids)

    fanout, stretch = 0, 1
    if spec.protocol == "pbft":
        replicas = [PbftReplica(i, ctx) for i in range(p.n)]
        depth = p.pipeline_depth
    elif spec.protocol == "hotstuff":
        replicas = [HotStuffReplica(i, ctx) for i in range(p.n)]
        depth = 3 * HotStuffReplica.max_inflight
    else:
        fanout, stretch = _kauri_shape(spec, topo)
        replicas = [KauriReplica(i, ctx, fanout=fanout, stretch=stretch) for i in range(p.n)]
        depth = 3 * stretch
    ctx.replicas = replicas

    per_client = spec.client.outstanding or auto_outstanding(spec, depth)
    timeout = 2 * p.timeout_ns
    clients = []
    for k in range(spec.client.clients):
        cs = ClientSpec(id=client_ids[k], outstanding=per_client,
                        payload_bytes=spec.client.request_bytes, reply_quorum=p.t + 1,
                        start_time=spec.client.start_time, timeout=timeout,
                        max_request_ops=spec.client.max_request_ops)
        clients.append(Client(cs, ctx))
    attackers = []
    for j, f in enumerate(dos):
        cs = ClientSpec(id=client_ids[spec.client.clients + j], outstanding=per_client,
                        payload_bytes=spec.client.request_bytes, reply_quorum=p.t + 1,
                        start_time=max(spec.client.start_time, f.timestamp),
                        overload=f.overload, timeout=timeout,
                        max_request_ops=spec.client.max_request_ops)
        attackers.append(Client(cs, ctx))
    for c in clients + attackers:
        c.start()

    crashed: list = []
    warnings: list = []
    exceeds = False
    for f in spec.faults:
        if f.type != FaultType.CRASH:
            continue
        plan = resolve_crash_count(f, p.n)
        warnings.extend(plan.warnings)
        exceeds = exceeds or plan.exceeds_resilience
        for w in plan.warnings:
            log.warning("%s: %s", spec.dirname, w)
        inject_crash(ctx, plan, f.timestamp, crashed)
    return ctx, clients, attackers, crashed, warnings, exceeds, fanout, stretch


def run_experiment(spec: ExperimentSpec, record: bool = False) -> RunResult:
    ctx, clients, attackers, crashed, warnings, exceeds, fanout, stretch = build_run(spec, record)
    summary = ctx.sim.run_until(spec.duration)
    normal = [s for c in clients for s in c.samples]
    attack = [s for c in attackers for s in c.samples]
    m = compute_metrics(ctx.log, spec.duration, spec.warmup, spec.cooldown, normal, attack)
    m.sent_msgs = list(ctx.net.sent_msgs)
    m.sent_bytes = list(ctx.net.sent_bytes)
    m.exceeds_resilience = exceeds
    m.view_changes = ctx.view_changes
    m.reconfigurations = ctx.reconfigurations
    m.warnings = warnings
    return RunResult(spec=spec, metrics=m, trace_hash=ctx.sim.trace_hash(), ctx=ctx,
                     clients=clients, attackers=attackers, crashed=crashed,
                     events=summary.events, stretch=stretch, fanout=fanout)


RESULT_COLUMNS = [
    "protocol", "label", "replicas", "seed", "duration_s", "steady_throughput_ops",
    "total_committed_ops", "consensus_latency_mean_ms", "consensus_latency_p50_ms",
    "consensus_latency_p95_ms", "decision_latency_mean_ms", "decision_latency_p50_ms",
    "decision_latency_p95_ms", "request_latency_mean_ms", "request_latency_p50_ms",
    "request_latency_p95_ms", "request_commit_latency_mean_ms", "request_commit_latency_p50_ms",
    "request_commit_latency_p95_ms", "attacker_latency_mean_ms", "view_changes",
    "reconfigurations", "crashed", "safety_violations", "exceeds_resilience", "starved",
    "messages_sent", "bytes_sent", "fanout", "stretch", "trace_hash",
]


def _f(x: float) -> str:
    return f"{x:.3f}"


def result_row(res: RunResult) -> list:
    m, s = res.metrics, res.spec
    return [
        s.protocol, s.label, s.params.n, s.seed, f"{s.duration / 1e9:g}",
        _f(m.steady_throughput), m.total_committed_ops,
        _f(m.consensus_latency.mean_ms), _f(m.consensus_latency.p50_ms),
        _f(m.consensus_latency.p95_ms), _f(m.decision_latency.mean_ms),
        _f(m.decision_latency.p50_ms), _f(m.decision_latency.p95_ms),
        _f(m.request_latency.mean_ms), _f(m.request_latency.p50_ms),
        _f(m.request_latency.p95_ms), _f(m.request_commit_latency.mean_ms),
        _f(m.request_commit_latency.p50_ms), _f(m.request_commit_latency.p95_ms),
        _f(m.attacker_latency.mean_ms), m.view_changes, m.reconfigurations,
        " ".join(str(v) for _, v in res.crashed), m.safety_violations,
        str(m.exceeds_resilience).lower(), str(m.starved).lower(),
        sum(m.sent_msgs), sum(m.sent_bytes), res.fanout, res.stretch, res.trace_hash,
    ]


def _csv(header: list, rows) -> str:
    buf = io.StringIO()
    buf.write(SCHEMA_LINE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_outputs(res: RunResult, out_dir: Path) -> Path:
    d = out_dir / res.spec.dirname
    d.mkdir(parents=True, exist_ok=True)
    (d / "results.csv").write_text(_csv(RESULT_COLUMNS, [result_row(res)]))
    (d / "throughput.csv").write_text(_csv(
        ["time_s", "throughput_ops"], res.metrics.throughput_series))
    samples = [("normal", c.id, s) for c in res.clients for s in c.samples]
    samples += [("attacker", c.id, s) for c in res.attackers for s in c.samples]
    samples.sort(key=lambda x: (x[2].completed_at, x[1]))
    (d / "latency.csv").write_text(_csv(
        ["completed_ms", "latency_ms", "ops", "client", "kind"],
        ([_f(to_ms(s.completed_at)), _f(to_ms(s.latency)), s.count, cid, kind]
         for kind, cid, s in samples)))
    (d / "resolved.yaml").write_text(dump_resolved(res.spec))
    (d / "trace-hash").write_text(res.trace_hash + "\n")
    return d


def _run_one(spec: ExperimentSpec, out_dir: Path) -> tuple[str, str | None]:
    try:
        res = run_experiment(spec)
        write_outputs(res, out_dir)
        if res.metrics.safety_violations:
            return spec.dirname, f"safety audit failed at {res.metrics.safety_violations} heights"
        return spec.dirname, None
    except Exception:
        return spec.dirname, traceback.format_exc()


def run_batch(specs: list[ExperimentSpec], out_dir: str | Path, parallel: int = 1) -> int:
    """Run experiments (already validated) and return a process exit status."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if parallel > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(_run_one, specs, [out_dir] * len(specs)))
    else:
        outcomes = [_run_one(s, out_dir) for s in specs]
    lines = []
    failed = 0
    for name, err in outcomes:
        if err is None:
            lines.append(f"ok {name}")
        else:
            failed += 1
            lines.append(f"FAILED {name}\n{err.rstrip()}")
            log.error("experiment %s failed", name)
    (out_dir / "batch.log").write_text("\n".join(lines) + "\n")
    return 1 if failed else 0
