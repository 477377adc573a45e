"""Complete-graph topologies from latency maps, and NIC-level message transport.

Transport model: each host has one FIFO uplink and one FIFO downlink. A message
occupies the sender uplink for ``size*8/bandwidth_up``, propagates for the
one-way latency of the region pair, and occupies the receiver downlink for
``size*8/bandwidth_down``. Packets stream through, so a message is delivered
once its last bit has both left the sender's uplink (plus propagation) and
passed the receiver's downlink. Packet loss never drops a message; each lost
MSS-sized packet adds one retransmission round trip to its completion time.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .engine import NS_PER_S, EventKind, Simulator, us

HEADER_BYTES = 64
MSS = 1500

MAPS_ENV = "BFTSIM_MAPS_DIR"


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class LatencyMap:
    """Symmetric region x region one-way latency matrix in microseconds."""

    name: str
    regions: list[str]
    one_way_us: list[list[int]]

    def __post_init__(self):
        self._index = {r: i for i, r in enumerate(self.regions)}

    def index(self, region: str) -> int:
        try:
            return self._index[region]
        except KeyError:
            raise ConfigError(f"unknown region {region!r} in latency map {self.name!r}") from None

    def __contains__(self, region: str) -> bool:
        return region in self._index

    def one_way(self, a: str, b: str) -> int:
        return self.one_way_us[self.index(a)][self.index(b)]


def one_way_latency(latency_map: LatencyMap, a: str, b: str) -> int:
    """One-way latency in microseconds between two regions."""
    return latency_map.one_way(a, b)


def uniform_map(replica_one_way_us: int, client_one_way_us: int | None = None) -> LatencyMap:
    """Two pseudo-regions: every replica link gets one latency, every client link the other."""
    if client_one_way_us is None:
        client_one_way_us = replica_one_way_us
    if replica_one_way_us <= 0 or client_one_way_us <= 0:
        raise ConfigError("uniform latencies must be positive")
    return LatencyMap(
        name="uniform",
        regions=["replica", "client"],
        one_way_us=[[replica_one_way_us, client_one_way_us],
                    [client_one_way_us, client_one_way_us]],
    )


def parse_latency_csv(text: str, name: str) -> LatencyMap:
    rows = [r for r in csv.reader(text.splitlines()) if r and not r[0].startswith("#")]
    if len(rows) < 2:
        raise ConfigError(f"latency map {name!r} is empty")
    header = [c.strip() for c in rows[0][1:]]
    rtt: dict[str, list[float]] = {}
    for row in rows[1:]:
        region = row[0].strip()
        values = [float(c) for c in row[1:]]
        if len(values) != len(header):
            raise ConfigError(f"latency map {name!r}: row {region!r} has {len(values)} cells, "
                              f"expected {len(header)}")
        rtt[region] = values
    if list(rtt) != header:
        raise ConfigError(f"latency map {name!r}: row and column regions differ")
    k = len(header)
    one_way = [[0] * k for _ in range(k)]
    for i, a in enumerate(header):
        for j in range(k):
            # asymmetric measurements are averaged so that one_way(a,b) == one_way(b,a)
            rt = (rtt[a][j] + rtt[header[j]][i]) / 2.0
            one_way[i][j] = int(round(rt * 1000.0 / 2.0))
            if one_way[i][j] <= 0:
                raise ConfigError(f"latency map {name!r}: non-positive latency {a}->{header[j]}")
    return LatencyMap(name=name, regions=header, one_way_us=one_way)


def _maps_dir() -> Path | None:
    override = os.environ.get(MAPS_ENV)
    return Path(override) if override else None


def available_maps() -> list[str]:
    names = {"uniform"}
    override = _maps_dir()
    if override and override.is_dir():
        names.update(p.stem for p in override.glob("*.csv"))
    for entry in resources.files("bftsim.maps").iterdir():
        if entry.name.endswith(".csv"):
            names.add(entry.name[:-4])
    return sorted(names)


def load_map(name: str) -> LatencyMap:
    """Load a map by bundled name, from ``$BFTSIM_MAPS_DIR``, or from a CSV path."""
    path = Path(name)
    if path.suffix == ".csv" and path.is_file():
        return parse_latency_csv(path.read_text(), path.stem)
    override = _maps_dir()
    if override is not None and (override / f"{name}.csv").is_file():
        return parse_latency_csv((override / f"{name}.csv").read_text(), name)
    bundled = resources.files("bftsim.maps") / f"{name}.csv"
    if bundled.is_file():
        return parse_latency_csv(bundled.read_text(), name)
    raise ConfigError(f"unknown latency map {name!r} (available: {', '.join(available_maps())})")


@dataclass
class HostSpec:
    id: int
    region: str
    bandwidth_up_bps: int
    bandwidth_down_bps: int
    role: str  # "replica" | "client"

    def __post_init__(self):
        if self.bandwidth_up_bps <= 0 or self.bandwidth_down_bps <= 0:
            raise ConfigError(f"host {self.id}: bandwidth must be positive")


@dataclass
class NetworkSpec:
    """Resolved ``network`` section: where hosts live and how fast their NICs are.

    ``replica_regions`` / ``client_regions`` are ``(region, count)`` lists, or
    ``None`` to spread hosts evenly over the map's regions in declared order.
    """

    latency: LatencyMap
    bandwidth_up_bps: int
    bandwidth_down_bps: int
    packet_loss: float = 0.0
    replica_regions: list[tuple[str, int]] | None = None
    client_regions: list[tuple[str, int]] | None = None


@dataclass
class Topology:
    hosts: list[HostSpec]
    latency: LatencyMap
    packet_loss: float = 0.0
    one_way_ns: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.packet_loss <= 1.0:
            raise ConfigError(f"packetLoss out of [0,1]: {self.packet_loss}")
        idx = [self.latency.index(h.region) for h in self.hosts]
        table = [[us(v) for v in row] for row in self.latency.one_way_us]
        self.one_way_ns = [[table[a][b] for b in idx] for a in idx]

    @property
    def replicas(self) -> list[HostSpec]:
        return [h for h in self.hosts if h.role == "replica"]

    @property
    def clients(self) -> list[HostSpec]:
        return [h for h in self.hosts if h.role == "client"]

    def latency_ns(self, a: int, b: int) -> int:
        return self.one_way_ns[a][b]


def _assign_regions(count: int, spec: list[tuple[str, int]] | None, latency: LatencyMap,
                    role: str) -> list[str]:
    if spec is None:
        regions = [r for r in latency.regions if r != "client"] if role == "replica" else None
        if latency.name == "uniform":
            return [role] * count
        regions = regions or latency.regions
        return [regions[i % len(regions)] for i in range(count)]
    out: list[str] = []
    for region, k in spec:
        latency.index(region)
        if k < 0:
            raise ConfigError(f"negative {role} count for region {region!r}")
        out.extend([region] * k)
    if len(out) != count:
        raise ConfigError(f"{role} region counts sum to {len(out)}, expected {count}")
    return out


def build_topology(spec: NetworkSpec, n_replicas: int, n_clients: int) -> Topology:
    """Replicas get host ids ``0..n-1``; clients follow."""
    hosts: list[HostSpec] = []
    for region in _assign_regions(n_replicas, spec.replica_regions, spec.latency, "replica"):
        hosts.append(HostSpec(len(hosts), region, spec.bandwidth_up_bps,
                              spec.bandwidth_down_bps, "replica"))
    for region in _assign_regions(n_clients, spec.client_regions, spec.latency, "client"):
        hosts.append(HostSpec(len(hosts), region, spec.bandwidth_up_bps,
                              spec.bandwidth_down_bps, "client"))
    return Topology(hosts=hosts, latency=spec.latency, packet_loss=spec.packet_loss)


@dataclass(slots=True)
class WireMessage:
    src: int
    dst: int
    size_bytes: int
    tag: str
    body: Any = None


@dataclass(slots=True)
class TransferRecord:
    src: int
    dst: int
    size_bytes: int
    sent_at: int
    up_start: int
    up_end: int
    delivered_at: int = -1


class Network:
    """Moves ``WireMessage`` objects between hosts inside one simulation run."""

    def __init__(self, sim: Simulator, topology: Topology, record: bool = False):
        self.sim = sim
        self.topology = topology
        n = len(topology.hosts)
        self._lat = topology.one_way_ns
        self._bw_up = [h.bandwidth_up_bps for h in topology.hosts]
        self._bw_down = [h.bandwidth_down_bps for h in topology.hosts]
        self._up_free = [0] * n
        self._down_free = [0] * n
        self._pair_last: dict[tuple[int, int], int] = {}
        self._handlers: list[Callable[[WireMessage], None] | None] = [None] * n
        self.crashed = [False] * n
        self.crash_at = [-1] * n
        self.loss = topology.packet_loss
        self.sent_msgs = [0] * n
        self.sent_bytes = [0] * n
        self.recv_msgs = [0] * n
        self.recv_bytes = [0] * n
        self.lost_packets = 0
        self.record = record
        self.transfers: list[TransferRecord] = []

    def attach(self, host: int, handler: Callable[[WireMessage], None]) -> None:
        self._handlers[host] = handler

    def crash(self, host: int) -> None:
        """Stop a host. Messages whose first bit already left its NIC still arrive."""
        self.crashed[host] = True
        self.crash_at[host] = self.sim.now()
        # the uplink queue behind the wire is discarded
        self._up_free[host] = self.sim.now()

    def uplink_free_at(self, host: int) -> int:
        return max(self._up_free[host], self.sim.now())

    def serialization_ns(self, size_bytes: int, bps: int) -> int:
        return -(-size_bytes * 8 * NS_PER_S // bps)

    def send(self, msg: WireMessage) -> int:
        """Queue ``msg`` on the sender uplink; returns the time its last bit leaves."""
        src, dst = msg.src, msg.dst
        if self.crashed[src]:
            raise RuntimeError(f"crashed host {src} attempted to send {msg.tag}")
        if msg.size_bytes < HEADER_BYTES:
            raise ValueError(f"message size {msg.size_bytes} below header overhead")
        now = self.sim.now()
        bits_ns = msg.size_bytes * 8 * NS_PER_S
        up_start = self._up_free[src]
        if up_start < now:
            up_start = now
        up_end = up_start + -(-bits_ns // self._bw_up[src])
        self._up_free[src] = up_end
        lat = self._lat[src][dst]
        penalty = 0
        if self.loss > 0.0:
            failures = 0
            rnd = self.sim.rng.random
            loss = self.loss
            for _ in range(-(-msg.size_bytes // MSS)):
                while rnd() < loss:
                    failures += 1
            self.lost_packets += failures
            penalty = failures * 2 * lat
        self.sent_msgs[src] += 1
        self.sent_bytes[src] += msg.size_bytes
        rec = None
        if self.record:
            rec = TransferRecord(src, dst, msg.size_bytes, now, up_start, up_end)
            self.transfers.append(rec)
        self.sim.schedule(up_start + lat, EventKind.MESSAGE_ARRIVAL, dst, self._arrive,
                          (msg, up_start, up_end + lat, penalty, rec))
        return up_end

    def _arrive(self, payload) -> None:
        msg, up_start, last_bit, penalty, rec = payload
        src, dst = msg.src, msg.dst
        if self.crashed[src] and up_start >= self.crash_at[src]:
            return
        now = self.sim.now()
        start = self._down_free[dst]
        if start < now:
            start = now
        done = start + -(-msg.size_bytes * 8 * NS_PER_S // self._bw_down[dst])
        self._down_free[dst] = done
        if done < last_bit:
            done = last_bit
        done += penalty
        key = (src, dst)
        prev = self._pair_last.get(key, 0)
        if done < prev:
            done = prev
        self._pair_last[key] = done
        if rec is not None:
            rec.delivered_at = done
        self.sim.schedule(done, EventKind.MESSAGE_DELIVERY, dst, self._deliver, msg)

    def _deliver(self, msg: WireMessage) -> None:
        dst = msg.dst
        if self.crashed[dst]:
            return
        self.recv_msgs[dst] += 1
        self.recv_bytes[dst] += msg.size_bytes
        handler = self._handlers[dst]
        if handler is not None:
            handler(msg)


def packets(size_bytes: int) -> int:
    return math.ceil(size_bytes / MSS)
