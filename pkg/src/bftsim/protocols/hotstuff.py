"""Chained HotStuff with a stable leader, star communication and a timeout pacemaker."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..engine import ms
from ..network import HEADER_BYTES, WireMessage
from .core import (VOTE_FIELDS_BYTES, Block, OpBatch, QuorumCertificate, Replica, RunContext,
                   wire_size)

PROTOCOL_TAGS = ("PROPOSAL", "VOTE", "NEW-VIEW")


def rank(qc: QuorumCertificate) -> tuple[int, int]:
    return (qc.view, qc.height)


def make_genesis() -> tuple[Block, QuorumCertificate]:
    genesis = Block(height=0, view=0, proposer=-1, uid=0)
    qc = QuorumCertificate(height=0, view=0, block_uid=0, voters=frozenset(), size_bytes=0,
                           block=genesis)
    return genesis, qc


@dataclass
class PendingProposal:
    block: Block
    voters: set = field(default_factory=set)


class HotStuffReplica(Replica):
    """Followers vote to the leader; certificates ride in the next proposal.

    A block is committed once it and its next two descendants on one parent
    chain are all certified. The parent of a newly certified block becomes the
    lock. Proposals are ordered by ``(view, bin, height)`` for the voting rule.
    """

    protocol = "hotstuff"
    max_inflight = 1

    def __init__(self, rid: int, ctx: RunContext):
        super().__init__(rid, ctx)
        self.handlers.update({
            "PROPOSAL": self.on_proposal,
            "VOTE": self.on_vote,
            "NEW-VIEW": self.on_new_view,
            "NOTICE": self.on_notice,
        })
        if ctx.genesis is None:
            ctx.genesis = make_genesis()
        genesis, gqc = ctx.genesis
        self.genesis = genesis
        self.genesis_qc = gqc
        self.high_qc = gqc
        self.locked = genesis
        self.exec_block = genesis
        self.tip = genesis
        self.certified: dict[int, QuorumCertificate] = {genesis.uid: gqc}
        self.announced = gqc  # best certificate already sent out in a proposal
        self.last_voted = (-1, -1, 0)
        self.bin = 0
        self.awaiting: dict[int, PendingProposal] = {}
        self.leader_ready = self.leader_of(0) == rid
        self.wish = 0
        self.backoff = 0
        self.awaiting_notice = False
        self.nv_msgs: dict[int, dict[int, QuorumCertificate]] = {}
        self.new_qcs: list[QuorumCertificate] = []
        self._to_execute: list[Block] = []
        self._batch_expired = False
        self.vote_size = self.params.sig.vote_bytes()

    # leader side -----------------------------------------------------------

    def on_new_ops(self) -> None:
        self.try_propose()
        self.watch()

    def can_propose(self) -> bool:
        return (self.is_leader and self.leader_ready and not self.crashed
                and len(self.awaiting) < self.max_inflight)

    def tail_needs_commit(self) -> bool:
        """True while followers cannot yet derive the commit of some non-empty block."""
        q = self.announced
        floor = 0
        b2 = q.block
        if b2 is not None and b2.justify is not None:
            b1 = b2.justify.block
            j0 = b1.justify
            # mirrors learn_qc: the three blocks must share a view for b0 to commit
            if j0 is not None and j0.block.view == b1.view == b2.view:
                floor = j0.height
        x = self.tip
        while x is not None and x.height > floor:
            if x.n_ops:
                return True
            x = x.parent
        return False

    def try_propose(self) -> None:
        bs = self.params.block_size
        while self.can_propose():
            if self.pending_ops >= bs:
                self.propose(self.take_ops(bs))
            elif self.pending_ops > 0 or self.tail_needs_commit():
                if not self._batch_expired:
                    if not self.timer_armed("batch"):
                        self.set_timer("batch", ms(self.params.batch_timeout_ms), self._batch_fired)
                    return
                self.propose(self.take_ops(bs))
            else:
                return

    def _batch_fired(self) -> None:
        self._batch_expired = True
        self.try_propose()

    def propose(self, slices: tuple) -> Block:
        self._batch_expired = False
        self.cancel_timer("batch")
        parent = self.tip
        justify = None if self.high_qc.block is self.genesis else self.high_qc
        extra = tuple(q for q in self.new_qcs if q is not justify)
        self.new_qcs = []
        for q in extra + ((justify,) if justify is not None else ()):
            if rank(q) > rank(self.announced):
                self.announced = q
        b = Block(height=parent.height + 1, view=self.view, proposer=self.id, slices=slices,
                  inline=self.params.inline, justify=justify, parent=parent, qcs=extra,
                  bin=self.bin, proposed_at=self.sim.now())
        self.tip = b
        self.awaiting[b.uid] = PendingProposal(b)
        self.disseminate(b)
        self.accept_block(b)
        return b

    def disseminate(self, b: Block) -> None:
        self.broadcast("PROPOSAL", wire_size(b, self.params), b)

    def on_vote(self, msg: WireMessage) -> None:
        view, height, uid = msg.body
        entry = self.awaiting.get(uid)
        if entry is None:
            return
        entry.voters.add(msg.src)
        if len(entry.voters) >= self.params.quorum:
            self.form_qc(entry)

    def form_qc(self, entry: PendingProposal) -> QuorumCertificate:
        b = entry.block
        qc = QuorumCertificate(height=b.height, view=b.view, block_uid=b.uid,
                               voters=frozenset(entry.voters), size_bytes=self.params.qc_bytes(),
                               block=b)
        del self.awaiting[b.uid]
        self.ctx.log.record_qc(qc)
        self.ctx.log.record_certified(b, self.sim.now())
        self.new_qcs.append(qc)
        if b.height > self.high_qc.block.height:
            self.high_qc = qc
        # the next proposal leaves before the replies of whatever this certificate commits
        self.try_propose()
        self.learn_qc(qc)
        self.flush()
        self.progress()
        return qc

    # all replicas ----------------------------------------------------------

    def vote_key(self, b: Block) -> tuple:
        return (b.view, b.bin, b.height)

    def extends(self, b: Block, anc: Block) -> bool:
        x = b
        while x is not None and x.height > anc.height:
            x = x.parent
        return x is anc

    def accept_block(self, b: Block) -> bool:
        """Learn the certificates a block carries and vote if the safety rule allows."""
        if b.justify is not None:
            self.learn_qc(b.justify)
        for qc in b.qcs:
            self.learn_qc(qc)
        if b.height >= self.tip.height and self.extends(b, self.exec_block):
            self.tip = b
        self.mark_inflight(b)
        key = self.vote_key(b)
        safe = self.extends(b, self.locked) or (
            b.justify is not None and b.justify.view > self.locked.view)
        if key > self.last_voted and safe:
            self.last_voted = key
            self.vote(b)
            return True
        return False

    def vote(self, b: Block) -> None:
        if self.is_leader and b.proposer == self.id:
            entry = self.awaiting.get(b.uid)
            if entry is not None:
                entry.voters.add(self.id)
                if len(entry.voters) >= self.params.quorum:
                    self.form_qc(entry)
            return
        self.send(self.leader_of(b.view), "VOTE", self.vote_size, (b.view, b.height, b.uid))

    def learn_qc(self, qc: QuorumCertificate) -> None:
        """Chain rules over justify links.

        Everyone who voted for ``b2`` had seen the certificate of ``b1`` it
        carried, so ``b1`` becomes the lock. If ``b1`` in turn carried the
        certificate of ``b0`` and all three share a view, ``b0`` is committed.
        """
        b2 = qc.block
        if b2 is None or b2.uid in self.certified:
            return
        self.certified[b2.uid] = qc
        if rank(qc) > rank(self.high_qc):
            self.high_qc = qc
        j1 = b2.justify
        if j1 is None:
            return
        b1 = j1.block
        if (b1.view, b1.height) > (self.locked.view, self.locked.height):
            self.locked = b1
        j0 = b1.justify
        if j0 is not None and j0.block.view == b1.view == b2.view:
            self.commit(j0.block)

    def commit(self, g: Block) -> None:
        if g.height <= self.exec_block.height:
            return
        chain = []
        x = g
        while x is not None and x.height > self.exec_block.height:
            chain.append(x)
            x = x.parent
        self._to_execute.extend(reversed(chain))
        self.exec_block = g
        self.awaiting_notice = False
        self._gc()

    def flush(self) -> None:
        """Execute committed blocks; called once the handler's protocol messages are sent."""
        if not self._to_execute:
            return
        blocks, self._to_execute = self._to_execute, []
        for blk in blocks:
            self.execute(blk)
        self.progress()

    def _gc(self) -> None:
        if len(self.certified) > 64:
            h = self.exec_block.height
            self.certified = {u: q for u, q in self.certified.items()
                              if q.block.height >= h - 4 or u == self.genesis.uid}

    def on_proposal(self, msg: WireMessage) -> None:
        b: Block = msg.body
        if b.view < self.view or msg.src != self.leader_of(b.view):
            return
        if b.view > self.view:
            self.enter_view(b.view)
        self.accept_block(b)
        self.flush()
        self.progress()

    def enter_view(self, v: int) -> None:
        self.view = v
        self.wish = max(self.wish, v)
        self.backoff = 0
        self.leader_ready = False
        self.bin = 0
        self.nv_msgs = {k: m for k, m in self.nv_msgs.items() if k > v}

    # pacemaker -------------------------------------------------------------

    def has_work(self) -> bool:
        if self.awaiting_notice or self.pending_ops or self.awaiting:
            return True
        x = self.tip
        while x is not None and x.height > self.exec_block.height:
            if x.n_ops:
                return True
            x = x.parent
        return False

    def watch(self) -> None:
        if not self.timer_armed("pm") and self.has_work():
            self.set_timer("pm", self.params.timeout_ns << self.backoff, self._pm_timeout)

    def progress(self) -> None:
        self.cancel_timer("pm")
        self.watch()

    def on_notice(self, msg: WireMessage) -> None:
        self.awaiting_notice = True
        self.watch()

    def _pm_timeout(self) -> None:
        self.wish = max(self.view, self.wish) + 1
        self.backoff += 1
        target = self.leader_of(self.wish)
        size = HEADER_BYTES + VOTE_FIELDS_BYTES + self.params.sig.sig_bytes + self.high_qc.size_bytes
        if target == self.id:
            self._record_new_view(self.wish, self.id, self.high_qc)
        else:
            self.send(target, "NEW-VIEW", size, (self.wish, self.high_qc))
        self.set_timer("pm", self.params.timeout_ns << self.backoff, self._pm_timeout)

    def on_new_view(self, msg: WireMessage) -> None:
        v, qc = msg.body
        self.learn_qc(qc)
        self._record_new_view(v, msg.src, qc)
        self.flush()

    def _record_new_view(self, v: int, sender: int, qc: QuorumCertificate) -> None:
        if v <= self.view or self.leader_of(v) != self.id:
            return
        senders = self.nv_msgs.setdefault(v, {})
        senders[sender] = qc
        if len(senders) >= self.params.quorum:
            self.install_as_leader(v)

    def install_as_leader(self, v: int) -> None:
        abandoned = [e.block for e in self.awaiting.values()]
        self.enter_view(v)
        self.leader_ready = True
        self.awaiting.clear()
        self.new_qcs = []
        self.announced = self.genesis_qc
        self.tip = self.high_qc.block
        chain = []
        x = self.tip
        while x is not None and x.height > self.exec_block.height:
            chain.append(x)
            x = x.parent
        self.reset_inflight(chain)
        self.requeue(abandoned)
        self.ctx.view_changes += 1
        self.ctx.max_view = max(self.ctx.max_view, v)
        self._batch_expired = False
        self.progress()
        self.try_propose()

    def requeue(self, blocks: list[Block]) -> None:
        """Put operations of abandoned own proposals back at the head of the queue."""
        for b in sorted(blocks, key=lambda blk: -blk.height):
            for s in reversed(b.slices):
                rs = self.inflight.get(s.client)
                if rs is not None:
                    rs.remove(s.first, s.first + s.count)
            batches = [OpBatch(s.client, s.first, s.count, s.submitted_at) for s in b.slices]
            for ob in reversed(batches):
                done = self.committed_ops.get(ob.client)
                if done is not None and not done.missing(ob.first_seq, ob.end):
                    continue
                self.pending.appendleft(ob)
                self._rs(self.queued, ob.client).add(ob.first_seq, ob.end)
                self.pending_ops += ob.count
                self.pending_by_client[ob.client] = self.pending_by_client.get(ob.client, 0) + ob.count
