"""PBFT: all-to-all pre-prepare / prepare / commit with a view change that re-proposes prepared blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..engine import ms
from ..network import HEADER_BYTES, WireMessage
from .core import VOTE_FIELDS_BYTES, Block, Replica, RunContext, wire_size

PROTOCOL_TAGS = ("PRE-PREPARE", "PREPARE", "COMMIT", "VIEW-CHANGE", "NEW-VIEW")


@dataclass
class Slot:
    view: int
    block: Block | None = None
    prepared: bool = False
    committed: bool = False


@dataclass
class ViewChangeInfo:
    sender: int
    view: int
    last_exec: int
    prepared: list = field(default_factory=list)  # (height, block, view it was prepared in)


@dataclass
class NewViewInfo:
    view: int
    low: int
    blocks: list


class PbftReplica(Replica):
    protocol = "pbft"

    def __init__(self, rid: int, ctx: RunContext):
        super().__init__(rid, ctx)
        self.handlers.update({
            "PRE-PREPARE": self.on_pre_prepare,
            "PREPARE": self.on_prepare,
            "COMMIT": self.on_commit,
            "VIEW-CHANGE": self.on_view_change,
            "NEW-VIEW": self.on_new_view,
            "NOTICE": self.on_notice,
        })
        self.slots: dict[int, Slot] = {}
        self.votes: dict[int, dict[tuple, set]] = {}
        self.next_exec = 1
        self.next_height = 1
        self.active = True
        self.wish = 0
        self.backoff = 0
        self.awaiting = False
        self.future: list[Block] = []
        self.vc_msgs: dict[int, dict[int, ViewChangeInfo]] = {}
        self._batch_expired = False
        self.vote_size = self.params.sig.vote_bytes()

    # normal case -----------------------------------------------------------

    def on_new_ops(self) -> None:
        self.try_propose()
        self.watch()

    def try_propose(self) -> None:
        if not self.is_leader or not self.active or self.crashed:
            return
        bs = self.params.block_size
        while self.next_height - self.next_exec < self.params.pipeline_depth:
            if self.pending_ops >= bs:
                self.propose(self.take_ops(bs))
            elif self.pending_ops > 0:
                if not self._batch_expired:
                    if not self.timer_armed("batch"):
                        self.set_timer("batch", ms(self.params.batch_timeout_ms),
                                       self._batch_fired)
                    return
                self.propose(self.take_ops(bs))
            else:
                return

    def _batch_fired(self) -> None:
        self._batch_expired = True
        self.try_propose()

    def propose(self, slices: tuple) -> None:
        self._batch_expired = False
        self.cancel_timer("batch")
        if not slices:
            return
        b = Block(height=self.next_height, view=self.view, proposer=self.id, slices=slices,
                  inline=self.params.inline, proposed_at=self.sim.now())
        self.next_height += 1
        self._send_pre_prepare(b)

    def _send_pre_prepare(self, b: Block) -> None:
        self.broadcast("PRE-PREPARE", wire_size(b, self.params), b)
        self._accept(b)

    def _accept(self, b: Block) -> None:
        slot = self.slots.get(b.height)
        if slot is None or slot.view != self.view:
            slot = self.slots[b.height] = Slot(self.view)
        slot.block = b
        self.mark_inflight(b)
        self._vote("PREPARE", b)
        self.check_prepared(b.height)

    def _vote(self, kind: str, b: Block) -> None:
        self.broadcast(kind, self.vote_size, (self.view, b.height, b.uid))
        self._add_vote(kind, self.view, b.height, b.uid, self.id)

    def _add_vote(self, kind, view, height, uid, sender) -> int:
        per_height = self.votes.get(height)
        if per_height is None:
            per_height = self.votes[height] = {}
        key = (kind, view, uid)
        voters = per_height.get(key)
        if voters is None:
            voters = per_height[key] = set()
        voters.add(sender)
        return len(voters)

    def _count(self, kind, height, b: Block) -> int:
        voters = self.votes.get(height, {}).get((kind, self.view, b.uid))
        return len(voters) if voters else 0

    def on_pre_prepare(self, msg: WireMessage) -> None:
        b: Block = msg.body
        if b.view > self.view or (b.view == self.view and not self.active):
            self.future.append(b)
            return
        if b.view < self.view or msg.src != self.leader or b.height < self.next_exec:
            return
        slot = self.slots.get(b.height)
        if slot is not None and slot.view == self.view and slot.block is not None:
            return
        self._accept(b)
        self.progress()

    def on_prepare(self, msg: WireMessage) -> None:
        view, height, uid = msg.body
        if height < self.next_exec:
            return
        self._add_vote("PREPARE", view, height, uid, msg.src)
        if view == self.view:
            self.check_prepared(height)

    def on_commit(self, msg: WireMessage) -> None:
        view, height, uid = msg.body
        if height < self.next_exec:
            return
        self._add_vote("COMMIT", view, height, uid, msg.src)
        if view == self.view:
            self.check_committed(height)

    def check_prepared(self, height: int) -> None:
        slot = self.slots.get(height)
        if slot is None or slot.block is None or slot.prepared or not self.active:
            return
        if self._count("PREPARE", height, slot.block) < self.params.quorum:
            return
        slot.prepared = True
        if self.is_leader:
            self.ctx.log.record_certified(slot.block, self.sim.now())
        self._vote("COMMIT", slot.block)
        self.check_committed(height)

    def check_committed(self, height: int) -> None:
        slot = self.slots.get(height)
        if slot is None or not slot.prepared or slot.committed:
            return
        if self._count("COMMIT", height, slot.block) < self.params.quorum:
            return
        slot.committed = True
        self.try_execute()

    def try_execute(self) -> None:
        advanced = False
        while True:
            slot = self.slots.get(self.next_exec)
            if slot is None or not slot.committed:
                break
            self._execute_height(slot.block)
            advanced = True
        if advanced:
            self.awaiting = False
            self.progress()
            self.try_propose()

    def _execute_height(self, b: Block) -> None:
        h = self.next_exec
        self.execute(b)
        self.slots.pop(h, None)
        self.votes.pop(h, None)
        self.next_exec += 1

    def catch_up(self, upto: int) -> None:
        """Adopt blocks other replicas already executed (state transfer is not priced)."""
        while self.next_exec <= upto:
            rec = self.ctx.log.heights.get(self.next_exec)
            if rec is None:
                break
            self._execute_height(rec.block)

    # view change -----------------------------------------------------------

    def has_work(self) -> bool:
        if self.awaiting or (self.pending_ops and not self.is_leader):
            return True
        return any(s.block is not None for h, s in self.slots.items() if h >= self.next_exec)

    def watch(self) -> None:
        if self.active and not self.timer_armed("vc") and self.has_work():
            self.set_timer("vc", self.params.timeout_ns << self.backoff, self._vc_timeout)

    def progress(self) -> None:
        if not self.active:
            return
        self.cancel_timer("vc")
        self.watch()

    def on_notice(self, msg: WireMessage) -> None:
        self.awaiting = True
        self.watch()

    def _vc_timeout(self) -> None:
        self.start_view_change(max(self.view, self.wish) + 1)

    def start_view_change(self, v: int) -> None:
        if v <= self.wish and not self.active:
            return
        self.wish = v
        self.active = False
        self.cancel_timer("batch")
        prepared = [(h, s.block, s.view) for h, s in sorted(self.slots.items())
                    if s.prepared and h >= self.next_exec]
        info = ViewChangeInfo(self.id, v, self.next_exec - 1, prepared)
        size = HEADER_BYTES + VOTE_FIELDS_BYTES + self.params.sig.sig_bytes
        size += sum(wire_size(b, self.params) + self.params.qc_bytes() for _, b, _ in prepared)
        self.broadcast("VIEW-CHANGE", size, info)
        self.vc_msgs.setdefault(v, {})[self.id] = info
        self.backoff += 1
        self.set_timer("vc", self.params.timeout_ns << self.backoff, self._vc_timeout)
        if self.leader_of(v) == self.id:
            self.check_new_view(v)

    def on_view_change(self, msg: WireMessage) -> None:
        info: ViewChangeInfo = msg.body
        if info.view <= self.view:
            return
        self.vc_msgs.setdefault(info.view, {})[info.sender] = info
        floor = max(self.wish, self.view)
        higher = {}
        for v, senders in self.vc_msgs.items():
            if v > floor:
                for s in senders:
                    if s != self.id:
                        higher[s] = min(higher.get(s, v), v)
        if len(higher) >= self.params.t + 1:
            self.start_view_change(min(higher.values()))
        if self.leader_of(info.view) == self.id:
            self.check_new_view(info.view)

    def check_new_view(self, v: int) -> None:
        msgs = self.vc_msgs.get(v, {})
        if self.id not in msgs or len(msgs) < self.params.quorum or self.view >= v:
            return
        chosen = list(msgs.values())[: len(msgs)]
        low = max(m.last_exec for m in chosen)
        self.catch_up(low)
        best: dict[int, tuple[int, Block]] = {}
        for m in chosen:
            for h, b, pv in m.prepared:
                if h > low and (h not in best or pv > best[h][0]):
                    best[h] = (pv, b)
        high = max(best, default=low)
        blocks = []
        now = self.sim.now()
        for h in range(low + 1, high + 1):
            if h in best:
                old = best[h][1]
                b = Block(height=h, view=v, proposer=self.id, slices=old.slices,
                          inline=old.inline, proposed_at=now, uid=old.uid)
            else:
                b = Block(height=h, view=v, proposer=self.id, proposed_at=now)
            blocks.append(b)
        self._install(v)
        self.next_height = high + 1
        size = HEADER_BYTES + VOTE_FIELDS_BYTES + self.params.quorum * self.params.sig.sig_bytes
        size += sum(wire_size(b, self.params) for b in blocks)
        self.broadcast("NEW-VIEW", size, NewViewInfo(v, low, blocks))
        self.ctx.view_changes += 1
        self.ctx.max_view = max(self.ctx.max_view, v)
        self.reset_inflight(blocks)
        for b in blocks:
            self._accept(b)
        self.progress()
        self.try_propose()

    def _install(self, v: int) -> None:
        self.view = v
        self.wish = max(self.wish, v)
        self.active = True
        self.backoff = 0
        self._batch_expired = False
        self.slots = {h: s for h, s in self.slots.items() if h < self.next_exec}
        self.vc_msgs = {k: m for k, m in self.vc_msgs.items() if k > v}
        self.cancel_timer("vc")

    def on_new_view(self, msg: WireMessage) -> None:
        info: NewViewInfo = msg.body
        if info.view < self.view or (info.view == self.view and self.active):
            return
        if msg.src != self.leader_of(info.view):
            return
        self.catch_up(info.low)
        self._install(info.view)
        self.reset_inflight(info.blocks)
        for b in info.blocks:
            if b.height >= self.next_exec:
                self._accept(b)
        future, self.future = self.future, []
        for b in future:
            if b.view == self.view:
                self.on_pre_prepare(WireMessage(self.leader, self.id, HEADER_BYTES, "PRE-PREPARE", b))
            elif b.view > self.view:
                self.future.append(b)
        self.progress()
