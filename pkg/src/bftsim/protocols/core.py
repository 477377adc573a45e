"""Blocks, quorum certificates, signature sizes, commit bookkeeping and the replica actor base."""

from __future__ import annotations

import bisect
import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, NamedTuple

from ..engine import EventKind, Simulator, ms, us
from ..network import HEADER_BYTES, Network, WireMessage

HASH_BYTES = 32
VOTE_FIELDS_BYTES = 16  # height + view


class SigScheme(str, Enum):
    SECP256K1 = "secp256k1"
    BLS = "bls"


@dataclass(frozen=True)
class SignatureModel:
    """Byte sizes of signatures and quorum certificates."""

    scheme: SigScheme = SigScheme.SECP256K1

    @property
    def sig_bytes(self) -> int:
        return 65 if self.scheme == SigScheme.SECP256K1 else 48

    @staticmethod
    def bitmap_bytes(n: int) -> int:
        return (n + 7) // 8

    def qc_bytes(self, n: int, quorum: int) -> int:
        if self.scheme == SigScheme.SECP256K1:
            return quorum * self.sig_bytes + self.bitmap_bytes(n)
        return self.sig_bytes + self.bitmap_bytes(n)

    def vote_bytes(self) -> int:
        return HEADER_BYTES + VOTE_FIELDS_BYTES + self.sig_bytes

    def aggregate_bytes(self, n: int) -> int:
        """One partially aggregated BLS signature plus the voter bitmap."""
        return HEADER_BYTES + VOTE_FIELDS_BYTES + self.sig_bytes + self.bitmap_bytes(n)


@dataclass(frozen=True)
class SystemParams:
    n: int
    block_size: int = 1000
    payload_bytes: int = 500
    reply_bytes: int = 0
    timeout_ms: float = 4000.0
    sig: SignatureModel = SignatureModel()
    inline: bool = False
    hash_bytes: int = HASH_BYTES
    batch_timeout_ms: float = 50.0
    pipeline_depth: int = 1
    processing_delay_us: float = 0.0
    per_client_cap: int = 0  # 0 disables the per-client pending cap

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one replica")
        if self.block_size < 1:
            raise ValueError("blockSize must be positive")

    @property
    def t(self) -> int:
        return (self.n - 1) // 3

    @property
    def quorum(self) -> int:
        return self.n - self.t

    @property
    def timeout_ns(self) -> int:
        return ms(self.timeout_ms)

    def op_wire_bytes(self, inline: bool | None = None) -> int:
        inline = self.inline if inline is None else inline
        return self.payload_bytes if inline else self.hash_bytes

    def qc_bytes(self) -> int:
        return self.sig.qc_bytes(self.n, self.quorum)


class OpSlice(NamedTuple):
    """A contiguous run of one client's operations ``[first, first+count)``."""

    client: int
    first: int
    count: int
    submitted_at: int = 0


@dataclass
class OpBatch:
    client: int
    first_seq: int
    count: int
    submitted_at: int

    @property
    def end(self) -> int:
        return self.first_seq + self.count


class RangeSet:
    """Set of integers stored as sorted disjoint half-open intervals."""

    __slots__ = ("_starts", "_ends")

    def __init__(self, ranges: Iterable[tuple[int, int]] = ()):
        self._starts: list[int] = []
        self._ends: list[int] = []
        for a, b in ranges:
            self.add(a, b)

    def __len__(self) -> int:
        return sum(e - s for s, e in zip(self._starts, self._ends))

    def intervals(self) -> list[tuple[int, int]]:
        return list(zip(self._starts, self._ends))

    def __contains__(self, x: int) -> bool:
        i = bisect.bisect_right(self._starts, x) - 1
        return i >= 0 and x < self._ends[i]

    def add(self, a: int, b: int) -> None:
        if a >= b:
            return
        starts, ends = self._starts, self._ends
        i = bisect.bisect_left(ends, a)  # first interval that ends at or after a
        j = bisect.bisect_right(starts, b)  # intervals [i, j) touch [a, b)
        if i < j:
            a = min(a, starts[i])
            b = max(b, ends[j - 1])
        starts[i:j] = [a]
        ends[i:j] = [b]

    def remove(self, a: int, b: int) -> None:
        if a >= b:
            return
        starts, ends = self._starts, self._ends
        i = bisect.bisect_right(ends, a)
        j = bisect.bisect_left(starts, b)
        if i >= j:
            return
        new_s, new_e = [], []
        if starts[i] < a:
            new_s.append(starts[i])
            new_e.append(a)
        if ends[j - 1] > b:
            new_s.append(b)
            new_e.append(ends[j - 1])
        starts[i:j] = new_s
        ends[i:j] = new_e

    def missing(self, a: int, b: int) -> list[tuple[int, int]]:
        """Sub-intervals of ``[a, b)`` not in the set."""
        out = []
        starts, ends = self._starts, self._ends
        i = bisect.bisect_right(ends, a)
        cur = a
        while i < len(starts) and starts[i] < b:
            if starts[i] > cur:
                out.append((cur, starts[i]))
            cur = max(cur, ends[i])
            i += 1
        if cur < b:
            out.append((cur, b))
        return out

    def covered(self, a: int, b: int) -> list[tuple[int, int]]:
        """Sub-intervals of ``[a, b)`` that are in the set."""
        out = []
        starts, ends = self._starts, self._ends
        i = bisect.bisect_right(ends, a)
        while i < len(starts) and starts[i] < b:
            lo, hi = max(a, starts[i]), min(b, ends[i])
            if lo < hi:
                out.append((lo, hi))
            i += 1
        return out


_block_ids = itertools.count(1)


@dataclass(eq=False)
class QuorumCertificate:
    height: int
    view: int
    block_uid: int
    voters: frozenset
    size_bytes: int
    block: "Block | None" = field(default=None, repr=False)


@dataclass(eq=False)
class Block:
    height: int
    view: int
    proposer: int
    slices: tuple = ()
    inline: bool = False
    justify: QuorumCertificate | None = None
    parent: "Block | None" = field(default=None, repr=False)
    qcs: tuple = ()  # extra certificates carried along (tree protocol)
    bin: int = 0
    proposed_at: int = 0
    uid: int = field(default_factory=lambda: next(_block_ids))

    def __post_init__(self):
        self.n_ops = sum(s.count for s in self.slices)


def wire_size(block: Block, params: SystemParams) -> int:
    size = HEADER_BYTES + block.n_ops * params.op_wire_bytes(block.inline)
    if block.justify is not None:
        size += block.justify.size_bytes
    for qc in block.qcs:
        size += qc.size_bytes
    return size


def qc_from_votes(votes: Iterable[tuple[int, int, int]], params: SystemParams,
                  block: Block | None = None) -> QuorumCertificate | None:
    """Build a certificate from ``(replica, height, view)`` votes, or ``None`` below quorum."""
    voters = set()
    key = None
    for replica, height, view in votes:
        if key is None:
            key = (height, view)
        elif key != (height, view):
            raise ValueError(f"mismatched votes: {key} vs {(height, view)}")
        voters.add(replica)
    if key is None or len(voters) < params.quorum:
        return None
    return QuorumCertificate(height=key[0], view=key[1],
                             block_uid=block.uid if block is not None else 0,
                             voters=frozenset(voters), size_bytes=params.qc_bytes(), block=block)


@dataclass
class HeightRecord:
    height: int
    block_uid: int
    n_ops: int
    proposer: int
    proposed_at: int
    first_commit: int
    commits: dict = field(default_factory=dict)  # replica -> time
    certified_at: int = -1
    slices: tuple = ()
    block: Block | None = field(default=None, repr=False)


class CommitLog:
    """Run-wide record of commits, used for metrics and the safety audit."""

    def __init__(self, n: int, t: int):
        self.n = n
        self.t = t
        self.heights: dict[int, HeightRecord] = {}
        self.violations: list[tuple[int, int, int, int]] = []
        self.qcs: dict[int, list[QuorumCertificate]] = {}
        self.certified: dict[int, int] = {}  # block uid -> time of first certificate

    def record_commit(self, height: int, block: Block, replica: int, at: int) -> None:
        rec = self.heights.get(height)
        if rec is None:
            rec = HeightRecord(height, block.uid, block.n_ops, block.proposer,
                               block.proposed_at, at, slices=block.slices, block=block)
            rec.certified_at = self.certified.get(block.uid, -1)
            self.heights[height] = rec
        elif rec.block_uid != block.uid:
            self.violations.append((height, replica, rec.block_uid, block.uid))
            return
        if replica in rec.commits:
            raise RuntimeError(f"replica {replica} committed height {height} twice")
        rec.commits[replica] = at
        if at < rec.first_commit:
            rec.first_commit = at

    def record_certified(self, block: Block, at: int) -> None:
        self.certified.setdefault(block.uid, at)

    def record_qc(self, qc: QuorumCertificate) -> None:
        self.qcs.setdefault(qc.height, []).append(qc)

    def safety_audit(self) -> list[int]:
        """Heights at which two replicas committed different blocks."""
        return sorted({v[0] for v in self.violations})

    def quorum_intersection_audit(self) -> list[int]:
        bad = []
        for height, qcs in self.qcs.items():
            for a, b in itertools.combinations(qcs, 2):
                if len(a.voters & b.voters) < self.t + 1:
                    bad.append(height)
                    break
        return bad

    def committed_ops(self) -> int:
        return sum(r.n_ops for r in self.heights.values())


@dataclass
class ClientReply:
    view: int
    replica: int
    slices: list  # list[OpSlice] for one client
    block_height: int


class RunContext:
    """Everything the actors of one run share: clock, network, parameters, log."""

    def __init__(self, sim: Simulator, net: Network, params: SystemParams,
                 client_ids: list[int]):
        self.sim = sim
        self.net = net
        self.params = params
        self.log = CommitLog(params.n, params.t)
        self.client_ids = client_ids
        self.replicas: list["Replica"] = []
        self.view_changes = 0
        self.reconfigurations = 0
        self.max_view = 0
        self.genesis = None
        self.shared: dict = {}  # protocol-wide caches (e.g. trees)


class Replica:
    """Base actor: messaging, timers, crash state, and client-operation bookkeeping.

    Pending operations are kept as a FIFO of ``OpBatch`` pieces. Per client the
    replica tracks which operation numbers are queued, inside uncommitted blocks
    it has accepted, or committed, so resubmitted and forwarded requests are
    never proposed twice.
    """

    protocol = "base"

    def __init__(self, rid: int, ctx: RunContext):
        self.id = rid
        self.ctx = ctx
        self.sim = ctx.sim
        self.net = ctx.net
        self.params = ctx.params
        self.n = ctx.params.n
        self.crashed = False
        self.view = 0
        self.pending: deque[OpBatch] = deque()
        self.pending_ops = 0
        self.queued: dict[int, RangeSet] = {}
        self.inflight: dict[int, RangeSet] = {}
        self.committed_ops: dict[int, RangeSet] = {}
        self.pending_by_client: dict[int, int] = {}
        self._cpu_free = 0
        self._timer_gen: dict[str, int] = {}
        self._next_gen = 0
        self.handlers: dict[str, Callable[[WireMessage], None]] = {"REQUEST": self.on_request}
        self.net.attach(rid, self.on_message)

    # messaging -----------------------------------------------------------

    def leader_of(self, view: int) -> int:
        return view % self.n

    @property
    def leader(self) -> int:
        return self.leader_of(self.view)

    @property
    def is_leader(self) -> bool:
        return self.leader == self.id

    def send(self, dst: int, tag: str, size: int, body: Any = None) -> int:
        return self.net.send(WireMessage(self.id, dst, size, tag, body))

    def broadcast(self, tag: str, size: int, body: Any = None,
                  targets: Iterable[int] | None = None) -> int:
        end = 0
        for dst in (range(self.n) if targets is None else targets):
            if dst != self.id:
                end = self.send(dst, tag, size, body)
        return end

    def on_message(self, msg: WireMessage) -> None:
        if self.crashed:
            return
        delay = self.params.processing_delay_us
        if delay > 0:
            start = max(self.sim.now(), self._cpu_free)
            self._cpu_free = start + us(delay)
            self.sim.schedule(self._cpu_free, EventKind.TIMER, self.id, self._dispatch, msg)
        else:
            self._dispatch(msg)

    def _dispatch(self, msg: WireMessage) -> None:
        if self.crashed:
            return
        handler = self.handlers.get(msg.tag)
        if handler is None:
            raise RuntimeError(f"{self.protocol} replica {self.id}: no handler for {msg.tag}")
        handler(msg)

    # timers --------------------------------------------------------------

    def set_timer(self, name: str, delay: int, callback: Callable[[], None]) -> None:
        """(Re)arm a named timer; any earlier instance of the same name is cancelled."""
        self._next_gen += 1
        self._timer_gen[name] = self._next_gen
        self.sim.after(delay, EventKind.TIMER, self.id, self._fire_timer,
                       (name, self._next_gen, callback))

    def cancel_timer(self, name: str) -> None:
        self._timer_gen.pop(name, None)

    def timer_armed(self, name: str) -> bool:
        return name in self._timer_gen

    def _fire_timer(self, payload) -> None:
        name, gen, callback = payload
        if self.crashed or self._timer_gen.get(name) != gen:
            return
        del self._timer_gen[name]
        callback()

    def crash(self) -> None:
        self.crashed = True
        self.net.crash(self.id)

    # client operations ---------------------------------------------------

    def _rs(self, table: dict[int, RangeSet], client: int) -> RangeSet:
        rs = table.get(client)
        if rs is None:
            rs = table[client] = RangeSet()
        return rs

    def on_request(self, msg: WireMessage) -> None:
        batches: list[OpBatch] = msg.body
        if not self.is_leader:
            # keep a copy in case this replica becomes leader, and pass it on
            self.enqueue(batches)
            size = HEADER_BYTES + sum(b.count for b in batches) * self.params.payload_bytes
            self.send(self.leader, "REQUEST", size, batches)
            return
        self.enqueue(batches)
        self.on_new_ops()

    def enqueue(self, batches: list[OpBatch]) -> int:
        added = 0
        cap = self.params.per_client_cap
        for b in batches:
            q = self._rs(self.queued, b.client)
            infl = self.inflight.get(b.client)
            done = self.committed_ops.get(b.client)
            pieces = [(b.first_seq, b.end)]
            for rs in (done, infl, q):
                if rs is not None:
                    pieces = [p for a, e in pieces for p in rs.missing(a, e)]
            for a, e in pieces:
                count = e - a
                if cap > 0:
                    room = cap - self.pending_by_client.get(b.client, 0)
                    if room <= 0:
                        break
                    count = min(count, room)
                    e = a + count
                self.pending.append(OpBatch(b.client, a, count, b.submitted_at))
                q.add(a, e)
                self.pending_ops += count
                self.pending_by_client[b.client] = self.pending_by_client.get(b.client, 0) + count
                added += count
        return added

    def take_ops(self, limit: int) -> tuple:
        """Pop up to ``limit`` fresh operations from the pending FIFO as slices."""
        out = []
        taken = 0
        pending = self.pending
        while pending and taken < limit:
            b = pending[0]
            q = self.queued.get(b.client)
            want = min(b.count, limit - taken)
            if want < b.count:
                pending[0] = OpBatch(b.client, b.first_seq + want, b.count - want, b.submitted_at)
                piece = (b.first_seq, b.first_seq + want)
            else:
                pending.popleft()
                piece = (b.first_seq, b.end)
            self.pending_ops -= want
            self.pending_by_client[b.client] -= want
            if q is not None:
                q.remove(*piece)
            pieces = [piece]
            for rs in (self.committed_ops.get(b.client), self.inflight.get(b.client)):
                if rs is not None:
                    pieces = [p for a, e in pieces for p in rs.missing(a, e)]
            for a, e in pieces:
                out.append(OpSlice(b.client, a, e - a, b.submitted_at))
                taken += e - a
        return tuple(out)

    def fresh_pending(self) -> int:
        return self.pending_ops

    def prune_pending(self) -> None:
        """Drop queued copies of operations that have been committed meanwhile."""
        kept = deque()
        for b in self.pending:
            done = self.committed_ops.get(b.client)
            pieces = done.missing(b.first_seq, b.end) if done is not None else [(b.first_seq, b.end)]
            removed = b.count - sum(e - a for a, e in pieces)
            if removed:
                self.pending_ops -= removed
                self.pending_by_client[b.client] -= removed
                q = self.queued.get(b.client)
                if q is not None:
                    for a, e in done.covered(b.first_seq, b.end):
                        q.remove(a, e)
            for a, e in pieces:
                kept.append(OpBatch(b.client, a, e - a, b.submitted_at))
        self.pending = kept

    def mark_inflight(self, block: Block) -> None:
        for s in block.slices:
            self._rs(self.inflight, s.client).add(s.first, s.first + s.count)

    def reset_inflight(self, blocks: Iterable[Block]) -> None:
        self.inflight = {}
        for b in blocks:
            self.mark_inflight(b)

    def execute(self, block: Block) -> None:
        """Apply a committed block: record it, update op tracking, reply to clients."""
        now = self.sim.now()
        self.ctx.log.record_commit(block.height, block, self.id, now)
        by_client: dict[int, list[OpSlice]] = {}
        for s in block.slices:
            end = s.first + s.count
            self._rs(self.committed_ops, s.client).add(s.first, end)
            infl = self.inflight.get(s.client)
            if infl is not None:
                infl.remove(s.first, end)
            by_client.setdefault(s.client, []).append(s)
        if not self.is_leader and self.pending_ops:
            self.prune_pending()
        reply_bytes = self.params.reply_bytes
        for client, slices in by_client.items():
            ops = sum(s.count for s in slices)
            size = HEADER_BYTES + VOTE_FIELDS_BYTES + ops * reply_bytes
            self.send(client, "REPLY", size, ClientReply(self.view, self.id, slices, block.height))

    def on_new_ops(self) -> None:
        """Hook: the leader learned about new operations."""

    def on_client_timeout_hint(self) -> None:
        """Hook for protocols that react to resubmitted requests."""
