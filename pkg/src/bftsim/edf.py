"""Experiment description files: YAML parsing, validation and defaults."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .network import ConfigError, LatencyMap, NetworkSpec, load_map, uniform_map
from .protocols.core import SigScheme, SignatureModel, SystemParams
from .workload import FaultSpec, FaultType

PROTOCOLS = ("pbft", "hotstuff", "kauri")

TOP_KEYS = {"protocolName", "protocolConnectorPath", "experiments"}
SECTION_KEYS = {
    "misc": {"duration", "seed", "warmup", "cooldown", "parallelism", "useShortestPath"},
    "network": {"bandwidthUp", "bandwidthDown", "latency", "packetLoss"},
    "replica": {"replicas", "blockSize", "replySize", "timeout", "bigRequestOpt", "sigScheme",
                "fanout", "pipelineStretch", "pipelineDepth", "batchTimeout",
                "processingDelay", "perClientCap"},
    "client": {"clients", "outStandingPerClient", "requestSize", "startTime", "numberOfHosts",
               "maxRequestOps"},
    "faults": {"type", "threshold", "target", "timestamp", "overload"},
}
LATENCY_KEYS = {"map", "uniform", "replicas", "clients"}

_UNITS_BPS = {"bit": 1, "kbit": 10**3, "mbit": 10**6, "gbit": 10**9,
              "kibit": 2**10, "mibit": 2**20, "gibit": 2**30}
_UNITS_NS = {"ns": 1, "us": 10**3, "ms": 10**6, "s": 10**9, "min": 60 * 10**9}

DEFAULT_PIPELINE_DEPTH = {"pbft": 1}  # only PBFT bounds its in-flight heights this way


def parse_bandwidth(value: Any, where: str) -> int:
    """``"25 Mbit"``, ``"10 Gibits"`` or ``"1 Gbit/s"`` to bits per second."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        bps = int(value)
    else:
        m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([KMG]i?)?bits?(?:/s|ps)?\s*", str(value),
                         re.IGNORECASE)
        if not m:
            raise ConfigError(f"{where}: cannot parse bandwidth {value!r}")
        prefix = (m.group(2) or "").lower()
        bps = int(float(m.group(1)) * _UNITS_BPS[prefix + "bit"])
    if bps <= 0:
        raise ConfigError(f"{where}: bandwidth must be positive")
    return bps


def parse_duration(value: Any, where: str, default_unit: str) -> int:
    """A time like ``"30 s"``, ``"1000 us"`` or a bare number in ``default_unit``; returns ns."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: cannot parse time {value!r}")
    if isinstance(value, (int, float)):
        num, unit = float(value), default_unit
    else:
        m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*(ns|us|ms|s|min)?\s*", str(value))
        if not m:
            raise ConfigError(f"{where}: cannot parse time {value!r}")
        num, unit = float(m.group(1)), m.group(2) or default_unit
    if num < 0:
        raise ConfigError(f"{where}: time must be non-negative")
    return int(round(num * _UNITS_NS[unit]))


def _region_counts(value: Any, where: str) -> list[tuple[str, int]] | None:
    if value is None:
        return None
    items: list[tuple[str, Any]] = []
    if isinstance(value, dict):
        items = list(value.items())
    elif isinstance(value, list):
        for entry in value:
            if not isinstance(entry, dict):
                raise ConfigError(f"{where}: expected region: count pairs, got {entry!r}")
            items.extend(entry.items())
    else:
        raise ConfigError(f"{where}: expected region: count pairs, got {value!r}")
    out = []
    for region, count in items:
        if not isinstance(count, int) or isinstance(count, bool) or count < 0:
            raise ConfigError(f"{where}: count for {region!r} must be a non-negative integer")
        out.append((str(region), count))
    return out


@dataclass
class ClientConfig:
    clients: int = 1
    outstanding: int | None = None  # per client; None means auto
    request_bytes: int = 500
    start_time: int = 0
    max_request_ops: int = 100


@dataclass
class ExperimentSpec:
    protocol: str
    label: str
    index: int
    duration: int
    seed: int
    warmup: int
    cooldown: int
    network: NetworkSpec
    params: SystemParams
    client: ClientConfig
    faults: list = field(default_factory=list)
    fanout: int | None = None
    stretch: int | None = None
    resolved: dict = field(default_factory=dict)

    @property
    def dirname(self) -> str:
        return f"{self.protocol}-{self.index}-{self.label}"


def _check_keys(section: dict, allowed: set, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key {key!r}")


def _int(value: Any, where: str, lo: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if value < lo:
        raise ConfigError(f"{where}: must be >= {lo}")
    return int(value)


def _split_experiment(item: Any, index: int) -> tuple[str, dict]:
    if not isinstance(item, dict) or not item:
        raise ConfigError(f"experiment #{index}: expected a mapping label: {{...}}")
    if len(item) == 1:
        label, body = next(iter(item.items()))
        return str(label), body or {}
    # ``- label:`` with the sections written at the same indentation
    labels = [k for k, v in item.items() if v is None and k not in SECTION_KEYS]
    if len(labels) != 1:
        raise ConfigError(f"experiment #{index}: cannot tell the label from the sections")
    body = {k: v for k, v in item.items() if k != labels[0]}
    return str(labels[0]), body


def _parse_latency(section: Any, where: str) -> tuple[LatencyMap, Any, Any, dict]:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: latency must be a mapping")
    _check_keys(section, LATENCY_KEYS, where)
    if section.get("uniform"):
        rep = parse_duration(section.get("replicas", "1 ms"), f"{where}.replicas", "us")
        cli = parse_duration(section.get("clients", section.get("replicas", "1 ms")),
                             f"{where}.clients", "us")
        lat = uniform_map(max(1, rep // 1000), max(1, cli // 1000))
        return lat, None, None, {"uniform": True, "replicas": f"{rep // 1000} us",
                                 "clients": f"{cli // 1000} us"}
    name = section.get("map", "aws21")
    lat = load_map(str(name))
    reps = _region_counts(section.get("replicas"), f"{where}.replicas")
    clis = _region_counts(section.get("clients"), f"{where}.clients")
    for spec in (reps, clis):
        for region, _ in spec or []:
            lat.index(region)
    resolved = {"map": str(name)}
    if reps is not None:
        resolved["replicas"] = {r: c for r, c in reps}
    if clis is not None:
        resolved["clients"] = {r: c for r, c in clis}
    return lat, reps, clis, resolved


def _parse_faults(value: Any, where: str, n: int) -> list[FaultSpec]:
    if value is None:
        return []
    entries = value if isinstance(value, list) else [value]
    out = []
    for i, entry in enumerate(entries):
        w = f"{where}[{i}]" if isinstance(value, list) else where
        if not isinstance(entry, dict):
            raise ConfigError(f"{w}: expected a mapping")
        _check_keys(entry, SECTION_KEYS["faults"], w)
        try:
            ftype = FaultType(str(entry.get("type", "")).lower())
        except ValueError:
            raise ConfigError(f"{w}: unknown fault type {entry.get('type')!r}") from None
        target = entry.get("target", "random")
        if isinstance(target, list):
            target = [_int(x, f"{w}.target") for x in target]
        elif target not in ("leader", "random"):
            raise ConfigError(f"{w}: target must be leader, random or an id list")
        threshold = entry.get("threshold")
        if threshold is not None:
            if isinstance(threshold, bool) or not isinstance(threshold, (int, float)):
                raise ConfigError(f"{w}: threshold must be a number")
            if not 0.0 <= threshold <= 1.0:
                raise ConfigError(f"{w}: threshold out of [0,1]: {threshold}")
        overload = entry.get("overload")
        if overload is not None:
            overload = _int(overload, f"{w}.overload", 1)
        ts = parse_duration(entry.get("timestamp", 0), f"{w}.timestamp", "s")
        try:
            out.append(FaultSpec(type=ftype, timestamp=ts, threshold=threshold, target=target,
                                 overload=overload))
        except ConfigError as e:
            raise ConfigError(f"{w}: {e}") from None
    return out


def parse_experiment(protocol: str, label: str, body: dict, index: int) -> ExperimentSpec:
    where = f"experiment #{index} ({label})"
    if not isinstance(body, dict):
        raise ConfigError(f"{where}: expected a mapping of sections")
    _check_keys(body, set(SECTION_KEYS), where)
    for name in SECTION_KEYS:
        if body.get(name) is not None and not isinstance(body[name], (dict, list)):
            raise ConfigError(f"{where}.{name}: expected a mapping")
        if name != "faults" and isinstance(body.get(name), dict):
            _check_keys(body[name], SECTION_KEYS[name], f"{where}.{name}")
    misc = body.get("misc") or {}
    net = body.get("network") or {}
    rep = body.get("replica") or {}
    cli = body.get("client") or {}

    duration = parse_duration(misc.get("duration", 60), f"{where}.misc.duration", "s")
    warmup = parse_duration(misc.get("warmup", 10), f"{where}.misc.warmup", "s")
    cooldown = parse_duration(misc.get("cooldown", 10), f"{where}.misc.cooldown", "s")
    if duration <= 0:
        raise ConfigError(f"{where}.misc.duration: must be positive")
    if duration < warmup + cooldown:
        raise ConfigError(f"{where}.misc: duration shorter than warmup + cooldown")
    seed = _int(misc.get("seed", 1), f"{where}.misc.seed")

    if "replicas" not in rep:
        raise ConfigError(f"{where}.replica.replicas: required")
    n = _int(rep["replicas"], f"{where}.replica.replicas", 1)
    bw_up = parse_bandwidth(net.get("bandwidthUp", "1 Gbit"), f"{where}.network.bandwidthUp")
    bw_down = parse_bandwidth(net.get("bandwidthDown", net.get("bandwidthUp", "1 Gbit")),
                              f"{where}.network.bandwidthDown")
    loss = net.get("packetLoss", 0.0)
    if isinstance(loss, bool) or not isinstance(loss, (int, float)) or not 0.0 <= loss <= 1.0:
        raise ConfigError(f"{where}.network.packetLoss: packetLoss out of [0,1]: {loss!r}")
    lat, reps, clis, lat_resolved = _parse_latency(
        net.get("latency", {"uniform": True, "replicas": "1 ms", "clients": "1 ms"}),
        f"{where}.network.latency")

    default_sig = "bls" if protocol == "kauri" else "secp256k1"
    try:
        sig = SigScheme(str(rep.get("sigScheme", default_sig)).lower())
    except ValueError:
        raise ConfigError(f"{where}.replica.sigScheme: unknown scheme {rep['sigScheme']!r}") from None
    if protocol == "kauri" and sig != SigScheme.BLS:
        raise ConfigError(f"{where}.replica.sigScheme: kauri requires bls")
    big_req = rep.get("bigRequestOpt", protocol != "pbft")
    if not isinstance(big_req, bool):
        raise ConfigError(f"{where}.replica.bigRequestOpt: expected true or false")
    fanout = rep.get("fanout")
    if fanout is not None:
        fanout = _int(fanout, f"{where}.replica.fanout", 2)
        if fanout >= n:
            raise ConfigError(f"{where}.replica.fanout: fanout {fanout} must be smaller than n={n}")
    stretch = rep.get("pipelineStretch")
    if stretch is not None:
        stretch = _int(stretch, f"{where}.replica.pipelineStretch", 1)
    depth = rep.get("pipelineDepth", DEFAULT_PIPELINE_DEPTH.get(protocol, 1))
    depth = _int(depth, f"{where}.replica.pipelineDepth", 1)
    if protocol == "kauri" and n < 3:
        raise ConfigError(f"{where}.replica.replicas: kauri needs at least 3 replicas")

    request_bytes = _int(cli.get("requestSize", 500), f"{where}.client.requestSize")
    params = SystemParams(
        n=n,
        block_size=_int(rep.get("blockSize", 1000), f"{where}.replica.blockSize", 1),
        payload_bytes=request_bytes,
        reply_bytes=_int(rep.get("replySize", 0), f"{where}.replica.replySize"),
        timeout_ms=parse_duration(rep.get("timeout", 4000), f"{where}.replica.timeout", "ms") / 1e6,
        sig=SignatureModel(sig),
        inline=not big_req,
        batch_timeout_ms=parse_duration(rep.get("batchTimeout", 50), f"{where}.replica.batchTimeout",
                                        "ms") / 1e6,
        pipeline_depth=depth,
        processing_delay_us=parse_duration(rep.get("processingDelay", 0),
                                           f"{where}.replica.processingDelay", "us") / 1e3,
        per_client_cap=_int(rep.get("perClientCap", 0), f"{where}.replica.perClientCap"),
    )
    if params.timeout_ms <= 0:
        raise ConfigError(f"{where}.replica.timeout: must be positive")

    n_clients = _int(cli.get("clients", 1), f"{where}.client.clients", 1)
    outstanding = cli.get("outStandingPerClient", "auto")
    if outstanding == "auto":
        outstanding = None
    else:
        outstanding = _int(outstanding, f"{where}.client.outStandingPerClient", 1)
    client = ClientConfig(
        clients=n_clients,
        outstanding=outstanding,
        request_bytes=request_bytes,
        start_time=parse_duration(cli.get("startTime", 0), f"{where}.client.startTime", "s"),
        max_request_ops=_int(cli.get("maxRequestOps", 100), f"{where}.client.maxRequestOps", 1),
    )
    if client.start_time >= duration:
        raise ConfigError(f"{where}.client.startTime: clients start after the run ends")

    faults = _parse_faults(body.get("faults"), f"{where}.faults", n)
    for f in faults:
        if f.timestamp >= duration:
            raise ConfigError(f"{where}.faults: timestamp beyond the run duration")
        if isinstance(f.target, list):
            for i in f.target:
                if not 0 <= i < n:
                    raise ConfigError(f"{where}.faults.target: {i} is not a replica id (n={n})")
            if len(set(f.target)) != len(f.target):
                raise ConfigError(f"{where}.faults.target: duplicate replica ids")
        if f.type == FaultType.CRASH and f.threshold is None and f.target == "random":
            raise ConfigError(f"{where}.faults: crash needs a threshold, target: leader, or ids")

    network = NetworkSpec(latency=lat, bandwidth_up_bps=bw_up, bandwidth_down_bps=bw_down,
                          packet_loss=float(loss), replica_regions=reps, client_regions=clis)
    if reps is not None and sum(c for _, c in reps) != n:
        raise ConfigError(f"{where}.network.latency.replicas: region counts sum to "
                          f"{sum(c for _, c in reps)}, expected {n}")
    if clis is not None and sum(c for _, c in clis) != n_clients:
        raise ConfigError(f"{where}.network.latency.clients: region counts sum to "
                          f"{sum(c for _, c in clis)}, expected {n_clients}")

    spec = ExperimentSpec(protocol=protocol, label=label, index=index, duration=duration,
                          seed=seed, warmup=warmup, cooldown=cooldown, network=network,
                          params=params, client=client, faults=faults, fanout=fanout,
                          stretch=stretch)
    spec.resolved = _resolved(spec, lat_resolved)
    return spec


def _resolved(spec: ExperimentSpec, latency: dict) -> dict:
    p = spec.params
    out = {
        "protocolName": spec.protocol,
        "label": spec.label,
        "index": spec.index,
        "misc": {"duration": f"{spec.duration / 1e9:g} s", "seed": spec.seed,
                 "warmup": f"{spec.warmup / 1e9:g} s", "cooldown": f"{spec.cooldown / 1e9:g} s"},
        "network": {"bandwidthUp": f"{spec.network.bandwidth_up_bps} bit",
                    "bandwidthDown": f"{spec.network.bandwidth_down_bps} bit",
                    "latency": latency, "packetLoss": spec.network.packet_loss},
        "replica": {"replicas": p.n, "blockSize": p.block_size, "replySize": p.reply_bytes,
                    "timeout": p.timeout_ms, "bigRequestOpt": not p.inline,
                    "sigScheme": p.sig.scheme.value, "pipelineDepth": p.pipeline_depth,
                    "batchTimeout": p.batch_timeout_ms, "processingDelay": p.processing_delay_us,
                    "perClientCap": p.per_client_cap},
        "client": {"clients": spec.client.clients,
                   "outStandingPerClient": spec.client.outstanding or "auto",
                   "requestSize": spec.client.request_bytes,
                   "startTime": f"{spec.client.start_time / 1e9:g} s",
                   "maxRequestOps": spec.client.max_request_ops},
    }
    if spec.protocol == "kauri":
        out["replica"]["fanout"] = spec.fanout or "auto"
        out["replica"]["pipelineStretch"] = spec.stretch or "auto"
    if spec.faults:
        out["faults"] = [{"type": f.type.value, "threshold": f.threshold, "target": f.target,
                          "timestamp": f"{f.timestamp / 1e9:g} s", "overload": f.overload}
                         for f in spec.faults]
    return out


def parse_edf_text(text: str, source: str = "<edf>") -> list[ExperimentSpec]:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: invalid YAML: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    _check_keys(doc, TOP_KEYS, source)
    protocol = str(doc.get("protocolName", "")).lower()
    if protocol not in PROTOCOLS:
        raise ConfigError(f"{source}: protocolName must be one of {', '.join(PROTOCOLS)}, "
                          f"got {doc.get('protocolName')!r}")
    items = doc.get("experiments")
    if not isinstance(items, list) or not items:
        raise ConfigError(f"{source}: experiments must be a non-empty list")
    specs = []
    for i, item in enumerate(items, start=1):
        label, body = _split_experiment(item, i)
        specs.append(parse_experiment(protocol, label, body, i))
    return specs


def parse_edf(path: str | Path) -> list[ExperimentSpec]:
    """Parse and validate every experiment of a file before anything runs."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such file")
    return parse_edf_text(path.read_text(), str(path))


def dump_resolved(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(spec.resolved, sort_keys=False)


__all__ = ["ExperimentSpec", "ClientConfig", "parse_edf", "parse_edf_text", "parse_bandwidth",
           "parse_duration", "dump_resolved", "PROTOCOLS"]
