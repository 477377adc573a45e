"""Kauri: HotStuff over a balanced tree with vote aggregation, pipelining and reconfiguration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..engine import NS_PER_S, ms
from ..network import ConfigError, WireMessage
from .core import Block, RunContext, SigScheme, wire_size
from .hotstuff import HotStuffReplica

PROTOCOL_TAGS = ("PROPOSAL", "VOTE", "AGG", "NEW-VIEW")

AGG_SLACK_MS = 10
# round trips granted per child edge: the vote itself plus one retransmission
AGG_ROUND_TRIPS = 2


def default_fanout(n: int) -> int:
    return max(2, math.ceil(math.sqrt(n - 1)))


def tree_depth(n: int, m: int) -> int:
    """Smallest d such that a complete m-ary tree of depth d holds n nodes."""
    d, size, level = 0, 1, 1
    while size < n:
        level *= m
        size += level
        d += 1
    return d


@dataclass
class TreeConfig:
    n: int
    fanout: int
    root: int
    levels: list  # node ids per depth, root first
    parent: dict = field(default_factory=dict)
    children: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def internal(self) -> set:
        return {v for v, kids in self.children.items() if kids}

    @property
    def leaves(self) -> list:
        return [v for v, kids in self.children.items() if not kids]

    def subtree(self, v: int) -> list:
        out, stack = [], [v]
        while stack:
            x = stack.pop()
            out.append(x)
            stack.extend(self.children[x])
        return out


def _level_sizes(n: int, m: int) -> list[int]:
    sizes, left, width = [1], n - 1, 1
    while left > 0:
        width = min(width * m, left)
        sizes.append(width)
        left -= width
    return sizes


def _internal_positions(sizes: list[int]) -> int:
    """Non-root nodes that have children."""
    return sum(min(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)) - 1


def distinct_bins(n: int, m: int) -> int:
    """Bins of the schedule whose internal sets do not overlap."""
    internals = _internal_positions(_level_sizes(n, m))
    return max(1, (n - 1) // internals) if internals > 0 else 1


def build_tree(n: int, m: int, leader: int, bin_index: int = 0) -> TreeConfig:
    """Balanced m-ary tree rooted at ``leader``.

    Non-root replicas are taken in id order starting after the leader and
    filled level by level; children of a level are dealt round-robin over the
    nodes of the level above. Bin ``k`` rotates the non-root order by ``k``
    times the number of internal positions, so each bin uses a fresh internal set.
    """
    if m < 2:
        raise ConfigError(f"fanout must be >= 2, got {m}")
    if m >= n:
        raise ConfigError(f"fanout {m} must be smaller than n={n}")
    if not 0 <= leader < n:
        raise ConfigError(f"leader {leader} is not a replica id")
    sizes = _level_sizes(n, m)
    others = [(leader + k) % n for k in range(1, n)]
    internals = _internal_positions(sizes)
    if bin_index and internals > 0:
        shift = (bin_index * internals) % (n - 1)
        others = others[shift:] + others[:shift]
    levels = [[leader]]
    pos = 0
    for size in sizes[1:]:
        levels.append(others[pos:pos + size])
        pos += size
    tree = TreeConfig(n=n, fanout=m, root=leader, levels=levels)
    tree.parent[leader] = None
    for nodes in levels:
        for v in nodes:
            tree.children[v] = []
    for upper, lower in zip(levels, levels[1:]):
        for i, v in enumerate(lower):
            p = upper[i % len(upper)]
            tree.parent[v] = p
            tree.children[p].append(v)
    return tree


def default_stretch(n: int, m: int, params, bandwidth_bps: int, one_way_ns: int) -> int:
    """Instances to start per stage so the root uplink never idles during a round."""
    d = tree_depth(n, m)
    probe = Block(height=1, view=0, proposer=0, slices=(), inline=params.inline)
    bits = (wire_size(probe, params) + params.block_size * params.op_wire_bytes()) * 8
    send_ns = m * bits * NS_PER_S / bandwidth_bps
    round_ns = 2 * d * one_way_ns + d * send_ns
    return max(1, math.ceil(round_ns / send_ns))


@dataclass
class AggregationState:
    block: Block
    waiting: set
    voters: set = field(default_factory=set)
    parent: int | None = None
    sent: bool = False


class KauriReplica(HotStuffReplica):
    """HotStuff-bls whose proposals travel down a tree and whose votes are aggregated on the way up."""

    protocol = "kauri"

    def __init__(self, rid: int, ctx: RunContext, fanout: int | None = None, stretch: int = 1):
        if ctx.params.sig.scheme != SigScheme.BLS:
            raise ConfigError("kauri requires the bls signature scheme")
        super().__init__(rid, ctx)
        self.fanout = fanout or default_fanout(self.n)
        if self.fanout >= self.n:
            raise ConfigError(f"fanout {self.fanout} must be smaller than n={self.n}")
        if stretch < 1:
            raise ConfigError("pipelineStretch must be >= 1")
        self.max_inflight = stretch
        self.handlers.update({"VOTE": self.on_child_vote, "AGG": self.on_child_vote})
        self.agg: dict[int, AggregationState] = {}
        self.agg_size = self.params.sig.aggregate_bytes(self.n)
        self.failed_rounds = 0

    # tree ------------------------------------------------------------------

    def tree(self, view: int, bin_index: int) -> TreeConfig:
        cache = self.ctx.shared.setdefault("kauri_trees", {})
        # once every disjoint internal set has failed, fall back to a star
        star = bin_index >= distinct_bins(self.n, self.fanout)
        key = (view % self.n, -1 if star else bin_index)
        t = cache.get(key)
        if t is None:
            m = self.n - 1 if star else self.fanout
            t = cache[key] = build_tree(self.n, m, self.leader_of(view), 0 if star else bin_index)
            if len(cache) > 256:
                cache.pop(next(iter(cache)))
        return t

    def agg_timeout(self, tree: TreeConfig, v: int) -> int:
        """Time an internal node waits for its subtree after its last forward left the NIC."""
        cache = self.ctx.shared.setdefault("kauri_timeouts", {})
        key = (tree.root, tuple(tree.levels[1]), v)
        hit = cache.get(key)
        if hit is not None:
            return hit
        lat = self.net.topology.one_way_ns
        worst = 0
        for c in tree.children[v]:
            below = self.agg_timeout(tree, c) if tree.children[c] else 0
            worst = max(worst, AGG_ROUND_TRIPS * 2 * lat[v][c] + below)
        out = worst + ms(AGG_SLACK_MS) if tree.children[v] else 0
        cache[key] = out
        return out

    # dissemination ---------------------------------------------------------

    def disseminate(self, b: Block) -> None:
        t = self.tree(b.view, b.bin)
        size = wire_size(b, self.params)
        end = self.sim.now()
        for c in t.children[self.id]:
            end = self.send(c, "PROPOSAL", size, b)
        self.agg[b.uid] = AggregationState(b, set(t.children[self.id]))
        self.set_timer(f"round{b.uid}", end - self.sim.now() + self.params.timeout_ns,
                       lambda uid=b.uid: self._round_timeout(uid))

    def on_proposal(self, msg: WireMessage) -> None:
        b: Block = msg.body
        if b.view < self.view or (b.view == self.view and b.bin < self.bin):
            return
        t = self.tree(b.view, b.bin)
        if t.parent.get(self.id) != msg.src:
            return
        if b.view > self.view:
            self.enter_view(b.view)
        if b.bin > self.bin:
            self.bin = b.bin
            self.agg.clear()
        kids = t.children[self.id]
        if kids:
            size = wire_size(b, self.params)
            end = self.sim.now()
            for c in kids:
                end = self.send(c, "PROPOSAL", size, b)
            self.agg[b.uid] = AggregationState(b, set(kids), parent=msg.src)
            self.set_timer(f"agg{b.uid}", end - self.sim.now() + self.agg_timeout(t, self.id),
                           lambda uid=b.uid: self._agg_timeout(uid))
        self.accept_block(b)
        self.flush()
        self.progress()

    # aggregation -----------------------------------------------------------

    def vote(self, b: Block) -> None:
        st = self.agg.get(b.uid)
        if st is None:
            if b.proposer != self.id:
                t = self.tree(b.view, b.bin)
                self.send(t.parent[self.id], "VOTE", self.vote_size, (b.uid, frozenset((self.id,))))
            return
        st.voters.add(self.id)
        self._check(st)

    def on_child_vote(self, msg: WireMessage) -> None:
        uid, voters = msg.body
        st = self.agg.get(uid)
        if st is None or st.sent or msg.src not in st.waiting:
            return
        st.waiting.discard(msg.src)
        st.voters |= voters
        self._check(st)

    def _check(self, st: AggregationState) -> None:
        if st.parent is not None:
            if not st.waiting:
                self._send_up(st)
            return
        uid = st.block.uid
        if len(st.voters) >= self.params.quorum:
            entry = self.awaiting.get(uid)
            del self.agg[uid]
            self.cancel_timer(f"round{uid}")
            if entry is not None:
                entry.voters = set(st.voters)
                self.form_qc(entry)
        elif not st.waiting:
            self.round_failed()

    def _send_up(self, st: AggregationState) -> None:
        st.sent = True
        uid = st.block.uid
        self.cancel_timer(f"agg{uid}")
        del self.agg[uid]
        self.send(st.parent, "AGG", self.agg_size, (uid, frozenset(st.voters)))

    def _agg_timeout(self, uid: int) -> None:
        st = self.agg.get(uid)
        if st is not None and not st.sent:
            self._send_up(st)

    def _round_timeout(self, uid: int) -> None:
        if uid in self.awaiting and self.is_leader:
            self.round_failed()

    # reconfiguration -------------------------------------------------------

    def round_failed(self) -> None:
        """Abandon every in-flight instance and move to the next tree of the schedule."""
        abandoned = [e.block for e in self.awaiting.values()]
        for b in abandoned:
            self.cancel_timer(f"round{b.uid}")
        self.awaiting.clear()
        self.agg.clear()
        self.bin += 1
        self.failed_rounds += 1
        self.ctx.reconfigurations += 1
        self.tip = self.high_qc.block
        chain = []
        x = self.tip
        while x is not None and x.height > self.exec_block.height:
            chain.append(x)
            x = x.parent
        self.reset_inflight(chain)
        self.requeue(abandoned)
        self._batch_expired = False
        self.try_propose()

    def enter_view(self, v: int) -> None:
        super().enter_view(v)
        self.agg.clear()
