"""Closed-loop clients, the denial-of-service client, and crash-fault injection."""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

from .engine import EventKind
from .network import HEADER_BYTES, ConfigError, WireMessage
from .protocols.core import ClientReply, OpBatch, RangeSet, RunContext

log = logging.getLogger(__name__)


@dataclass
class ClientSpec:
    id: int
    outstanding: int
    payload_bytes: int
    reply_quorum: int
    start_time: int = 0
    overload: int = 1
    timeout: int = 0  # client resubmission timeout in ns; 0 disables it
    max_request_ops: int = 100

    def __post_init__(self):
        if self.outstanding < 1:
            raise ConfigError(f"client {self.id}: outstanding must be >= 1")
        if self.overload < 1:
            raise ConfigError(f"client {self.id}: overload must be >= 1")

    @property
    def cap(self) -> int:
        return self.outstanding * self.overload

    @property
    def malicious(self) -> bool:
        return self.overload > 1


@dataclass
class LatencySample:
    completed_at: int
    latency: int
    count: int


class Client:
    """Keeps ``outstanding * overload`` operations in flight.

    An operation completes once ``reply_quorum`` distinct replicas reported the
    same slice committed. Each completion immediately issues the same number of
    fresh operations. Requests go to the leader of the newest view seen in
    replies; when a reply reveals a newer view, all open operations are sent to
    the new leader. If nothing completes for ``timeout``, open operations are
    resent to the next replica in leader order.
    """

    def __init__(self, spec: ClientSpec, ctx: RunContext):
        self.spec = spec
        self.ctx = ctx
        self.sim = ctx.sim
        self.net = ctx.net
        self.n = ctx.params.n
        self.id = spec.id
        self.next_seq = 0
        self.open = RangeSet()
        self.open_count = 0
        self.max_open = 0
        self._batch_starts: list[int] = []
        self._batches: dict[int, OpBatch] = {}
        self._lo = 0
        self._votes: dict[tuple[int, int], set] = {}
        self.view = 0
        self.suspect = 0
        self.samples: list[LatencySample] = []
        self.completed = 0
        self.resubmissions = 0
        self._last_progress = 0
        self._timer_gen = 0
        self._since_purge = 0
        self.net.attach(spec.id, self.on_message)

    @property
    def target(self) -> int:
        return (self.view + self.suspect) % self.n

    def start(self) -> None:
        self.sim.schedule(self.spec.start_time, EventKind.TIMER, self.id, self._begin)

    def _begin(self, _=None) -> None:
        self._last_progress = self.sim.now()
        self.issue(self.spec.cap)
        self._arm_timer()

    def issue(self, count: int) -> None:
        now = self.sim.now()
        batches = []
        while count > 0:
            k = min(count, self.spec.max_request_ops)
            b = OpBatch(self.id, self.next_seq, k, now)
            self.next_seq += k
            self._batch_starts.append(b.first_seq)
            self._batches[b.first_seq] = b
            self.open.add(b.first_seq, b.end)
            self.open_count += k
            batches.append(b)
            count -= k
        if self.open_count > self.spec.cap:
            raise AssertionError(f"client {self.id} exceeded its in-flight cap")
        self.max_open = max(self.max_open, self.open_count)
        self._send(batches, self.target)

    def _send(self, batches: list[OpBatch], dst: int) -> None:
        for b in batches:
            size = HEADER_BYTES + b.count * self.spec.payload_bytes
            self.net.send(WireMessage(self.id, dst, size, "REQUEST", [b]))

    def _open_batches(self) -> list[OpBatch]:
        out = []
        for first in self._batch_starts[self._lo:]:
            b = self._batches.get(first)
            if b is None:
                continue
            for a, e in self.open.covered(b.first_seq, b.end):
                out.append(OpBatch(self.id, a, e - a, b.submitted_at))
        return out

    def on_message(self, msg: WireMessage) -> None:
        if msg.tag != "REPLY":
            return
        reply: ClientReply = msg.body
        if reply.view > self.view:
            self.view = reply.view
            self.suspect = 0
            # the leader changed: whatever the old leader held is lost
            self.resubmissions += 1
            self._send(self._open_batches(), self.target)
        elif reply.view == self.view:
            self.suspect = 0
        quorum = self.spec.reply_quorum
        freed = 0
        for s in reply.slices:
            key = (s.first, s.count)
            voters = self._votes.get(key)
            if voters is None:
                voters = self._votes[key] = set()
            if reply.replica in voters or len(voters) >= quorum:
                continue
            voters.add(reply.replica)
            if len(voters) == quorum:
                freed += self._complete(s.first, s.first + s.count)
        if freed:
            self._last_progress = self.sim.now()
            self.issue(freed)

    def _complete(self, a: int, e: int) -> int:
        now = self.sim.now()
        done = 0
        for lo, hi in self.open.covered(a, e):
            i = bisect.bisect_right(self._batch_starts, lo, self._lo) - 1
            while lo < hi:
                b = self._batches[self._batch_starts[i]]
                part_hi = min(hi, b.end)
                k = part_hi - lo
                self.samples.append(LatencySample(now, now - b.submitted_at, k))
                done += k
                lo = part_hi
                i += 1
        self.open.remove(a, e)
        if done:
            self.open_count -= done
            self.completed += done
            self._gc()
        return done

    def _gc(self) -> None:
        # forget batches below the lowest open operation
        if not len(self.open.intervals()):
            low = self.next_seq
        else:
            low = self.open.intervals()[0][0]
        starts = self._batch_starts
        while self._lo < len(starts):
            b = self._batches[starts[self._lo]]
            if b.end > low:
                break
            del self._batches[starts[self._lo]]
            self._lo += 1
        if self._lo > 4096:
            del starts[:self._lo]
            self._lo = 0
        self._since_purge += 1
        if self._since_purge >= 1024:
            self._since_purge = 0
            self._votes = {k: v for k, v in self._votes.items() if k[0] + k[1] > low}

    def _arm_timer(self) -> None:
        if self.spec.timeout <= 0:
            return
        self._timer_gen += 1
        self.sim.schedule(self._last_progress + self.spec.timeout, EventKind.TIMER, self.id,
                          self._on_timer, self._timer_gen)

    def _on_timer(self, gen: int) -> None:
        if gen != self._timer_gen:
            return
        now = self.sim.now()
        if now - self._last_progress >= self.spec.timeout and self.open_count:
            self.suspect += 1
            self.resubmissions += 1
            batches = self._open_batches()
            self._send(batches, self.target)
            # the rest only learn that work is outstanding, so they watch the leader
            notice = HEADER_BYTES + 32 * len(batches)
            for r in range(self.n):
                if r != self.target:
                    self.net.send(WireMessage(self.id, r, notice, "NOTICE", None))
            self._last_progress = now
        self._arm_timer()


class FaultType(str, Enum):
    CRASH = "crash"
    DOS = "dos"


@dataclass
class FaultSpec:
    type: FaultType
    timestamp: int = 0
    threshold: float | None = None
    target: str | list = "random"  # "leader" | "random" | explicit id list
    overload: int | None = None

    def __post_init__(self):
        if self.type == FaultType.DOS and (self.overload is None or self.overload < 1):
            raise ConfigError("dos fault requires an explicit overload >= 1")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold out of [0,1]: {self.threshold}")


@dataclass
class CrashPlan:
    """Replica ids selected for crashing (resolved at trigger time for ``leader``)."""

    count: int
    target: str | list
    warnings: list = field(default_factory=list)
    exceeds_resilience: bool = False


def resolve_crash_count(fault: FaultSpec, n: int) -> CrashPlan:
    t = (n - 1) // 3
    warnings = []
    if isinstance(fault.target, list):
        ids = fault.target
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate replica ids in fault target")
        for i in ids:
            if not 0 <= i < n:
                raise ConfigError(f"fault target {i} is not a replica id (n={n})")
        count = len(ids)
    elif fault.threshold is not None:
        count = math.floor(fault.threshold * n)
        if count == 0:
            warnings.append("threshold resolves to zero")
    elif fault.target == "leader":
        count = 1
    else:
        raise ConfigError("crash fault needs a threshold, target: leader, or an id list")
    if count > n:
        raise ConfigError(f"cannot crash {count} of {n} replicas")
    return CrashPlan(count=count, target=fault.target, warnings=warnings,
                     exceeds_resilience=count > t)


def select_crash_victims(plan: CrashPlan, n: int, current_leader: int, rng) -> list[int]:
    if isinstance(plan.target, list):
        return list(plan.target)
    if plan.count == 0:
        return []
    if plan.target == "leader":
        others = [i for i in range(n) if i != current_leader]
        return [current_leader] + rng.sample(others, plan.count - 1)
    return sorted(rng.sample(range(n), plan.count))


def inject_crash(ctx: RunContext, plan: CrashPlan, at: int, crashed_log: list) -> None:
    """Schedule the crash; victims are chosen when the fault fires."""

    def fire(_):
        replicas = ctx.replicas
        leader = max((r for r in replicas if not r.crashed), key=lambda r: r.view,
                     default=replicas[0])
        victims = select_crash_victims(plan, ctx.params.n, leader.leader, ctx.sim.rng)
        for v in victims:
            replicas[v].crash()
        crashed_log.extend((ctx.sim.now(), v) for v in victims)

    ctx.sim.schedule(at, EventKind.FAULT, -1, fire)
