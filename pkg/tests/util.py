"""Small builders shared by the test modules."""

from __future__ import annotations

import copy
from collections import Counter

import yaml

from bftsim.edf import parse_edf_text

LAN = {"bandwidthUp": "1 Gbit", "bandwidthDown": "1 Gbit",
       "latency": {"uniform": True, "replicas": "5 ms", "clients": "5 ms"}}


def edf_text(protocol: str, experiments: list[tuple[str, dict]]) -> str:
    return yaml.safe_dump({"protocolName": protocol,
                           "experiments": [{label: body} for label, body in experiments]})


def spec(protocol: str, n: int = 4, duration: str = "10 s", network: dict | None = None,
         replica: dict | None = None, client: dict | None = None, faults=None,
         misc: dict | None = None, label: str = "t"):
    body = {
        "misc": {"duration": duration, "warmup": "1 s", "cooldown": "1 s", **(misc or {})},
        "network": copy.deepcopy(network or LAN),
        "replica": {"replicas": n, "blockSize": 50, **(replica or {})},
        "client": {"clients": 2, "outStandingPerClient": 100, "requestSize": 100, **(client or {})},
    }
    if faults is not None:
        body["faults"] = faults
    return parse_edf_text(edf_text(protocol, [(label, body)]))[0]


def count_tags(ctx) -> Counter:
    """Wrap the network so every sent message is tallied by (tag, src)."""
    counts: Counter = Counter()
    send = ctx.net.send

    def counted(msg):
        counts[msg.tag] += 1
        counts[(msg.tag, msg.src)] += 1
        return send(msg)

    ctx.net.send = counted
    return counts
