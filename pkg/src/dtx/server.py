"""Coordinator and participant state machines for the hybrid OCC+2PC commit.

A ServerNode is purely reactive: it consumes envelopes and timer callbacks
and produces sends, replies, log appends, and state changes.  It never
blocks, so the same object runs unchanged on the deterministic simulator
(virtual clock, in-process transport) and on the threaded socket runtime.

Commit flow for a multi-owner transaction:
  1. persist CoordPrepare (durable), send Prepare to every remote owner,
     run the local slice in-process;
  2. each participant locks (shared for read-only keys, exclusive for
     written keys), validates read versions, freezes post-versions,
     persists PartReady (durable), votes Ready -- or votes Abort;
  3. all Ready -> persist CoordCommit (durable), answer the client, and
     hand the decision fan-out to the batched ack stage; any Abort vote ->
     persist CoordAbort and fan the abort out immediately;
  4. participants persist the decision, apply frozen post-versions,
     release locks, and acknowledge; once every participant acked, the
     transaction is reported complete to the garbage collector.

Single-owner transactions take the one-phase path: no wire messages, one
durable flush carrying both the write set and the commit decision.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

from . import rpc
from .env import NodeEnv
from .gc import GcLog, GcManager
from .locks import LockTable, RejectReason
from .model import (
    CoordAbort,
    CoordCommit,
    CoordPrepare,
    CoordState,
    PartAbort,
    PartCommit,
    PartReady,
    PartState,
    ServerId,
    SubTranx,
    Transaction,
    TranxID,
    TranxIdIssuer,
    coord_transition_legal,
    part_transition_legal,
)
from .rpc import AbortReason, DedupTable, Envelope, MsgType
from .storage import KvStore, StorageEngine
from .wal import MAX_ENTRY, TranxLog


def owner_of(key: bytes, members: list[ServerId]) -> ServerId:
    """Static key partitioning: crc32 hash modulo cluster size."""
    return members[zlib.crc32(key) % len(members)]


@dataclass
class ServerConfig:
    members: list[ServerId]
    wal_file_capacity: int = 1 << 20
    lock_wait: float = 0.050
    gc_period: float = 0.100
    ack_flush_period: float = 0.002
    decision_resend: float = 0.250
    prepare_retry: float = 0.200
    prepare_budget: int = 8
    status_retry: float = 0.100
    cache_capacity: int = 0
    client_window: int = 1024


@dataclass
class CoordRec:
    tranx: TranxID
    subs: dict[ServerId, SubTranx]
    state: CoordState = CoordState.START
    pending_ready: set[ServerId] = field(default_factory=set)
    pending_ack: set[ServerId] = field(default_factory=set)
    decision: str | None = None
    abort_reason: AbortReason | None = None
    piggyback: list = field(default_factory=list)
    client_key: tuple[int, int] | None = None  # (client id, message id)
    reply_to: Envelope | None = None
    retry_timer: object = None
    retries: int = 0
    last_fanout: float = -1.0
    complete: bool = False


@dataclass
class PartRec:
    tranx: TranxID
    reads: tuple
    writes: tuple = ()  # (key, value, post_version) frozen at prepare
    state: PartState = PartState.START


class ServerNode:
    def __init__(
        self,
        sid: ServerId,
        config: ServerConfig,
        env: NodeEnv,
        store: KvStore,
        ctx,
    ) -> None:
        assert sid in config.members
        self.sid = sid
        self.config = config
        self.env = env
        self.ctx = ctx
        self.members = sorted(config.members)
        self.peers = [m for m in self.members if m != sid]

        self.tranxlog = TranxLog(env, config.wal_file_capacity)
        self.storage = StorageEngine(store, config.cache_capacity)
        self.locks = LockTable(ctx.set_timer, ctx.cancel_timer, config.lock_wait)
        self.locks.trace = self._trace
        self.dedup = DedupTable(config.client_window)
        self.gclog = GcLog(env, self.members)
        self.gc = GcManager(
            server=sid,
            gclog=self.gclog,
            tranxlog=self.tranxlog,
            lock_table=self.locks,
            store=self.storage,
            broadcast_fn=self._broadcast_lc,
            trace=self._trace,
        )
        self.issuer = TranxIdIssuer(sid, 0)
        self.gc.issued_max_fn = lambda: self.issuer.last_issued

        self.coord: dict[TranxID, CoordRec] = {}
        self.part: dict[TranxID, PartRec] = {}
        self.pending_client: dict[tuple[int, int], TranxID] = {}
        # decision fan-out batches: dest -> {"Commit": [tranx...], "Abort": [...]}
        self._ack_batches: dict[ServerId, dict[str, list[TranxID]]] = {}
        # decided transactions still missing participant acks; kept as an
        # index so the resend pass never scans the whole coordinator map
        self._undelivered: set[TranxID] = set()
        self._msg_seq = 0
        self._pending_status: dict[int, TranxID] = {}
        self._client_epoch = 0
        self._next_client = 0
        self.recovered = False
        self.stats = {
            "commits": 0,
            "aborts": 0,
            "msgs_sent": 0,
            "reads": 0,
            "one_phase": 0,
        }

    # -- plumbing --------------------------------------------------------------

    def _trace(self, event: str, **info) -> None:
        tracer = getattr(self.ctx, "trace", None)
        if tracer is not None:
            tracer(self.sid, event, **info)

    def _crash_point(self, label: str) -> None:
        hook = getattr(self.ctx, "crash_point", None)
        if hook is not None:
            hook(self.sid, label)

    def _send(self, dest: ServerId, env: Envelope) -> None:
        self.stats["msgs_sent"] += 1
        self._trace("msg.send", dest=dest, type=env.msg_type.name, tranx=env.tranx)
        self.ctx.send(dest, env)
        self._crash_point(f"send.{env.msg_type.name}")

    def _reply(self, request: Envelope, payload: bytes) -> None:
        resp = Envelope(
            MsgType.RESPONSE, rpc.SERVER, self.sid, request.message_id, request.tranx, payload
        )
        self.ctx.reply(request, resp)

    def _next_msg_id(self) -> int:
        self._msg_seq += 1
        return self._msg_seq

    def _server_env(self, msg_type: MsgType, tranx: TranxID | None, payload: bytes) -> Envelope:
        return Envelope(msg_type, rpc.SERVER, self.sid, self._next_msg_id(), tranx, payload)

    def _append(self, record, durable: bool) -> None:
        self.tranxlog.append(record, durable)
        if durable:
            self._crash_point(f"wal.{type(record).__name__}")

    def _set_coord_state(self, rec: CoordRec, state: CoordState) -> None:
        assert coord_transition_legal(rec.state, state), (rec.state, state)
        self._trace("coord.state", tranx=rec.tranx, frm=rec.state.value, to=state.value)
        rec.state = state

    def _set_part_state(self, rec: PartRec, state: PartState) -> None:
        assert part_transition_legal(rec.state, state), (rec.state, state)
        self._trace("part.state", tranx=rec.tranx, frm=rec.state.value, to=state.value)
        rec.state = state

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        """Local recovery, then periodic stages; call before serving traffic."""
        self.recover_local()
        self.ctx.set_timer(self.config.gc_period, self._gc_tick)
        self.ctx.set_timer(self.config.ack_flush_period, self._ack_tick)
        self.recover_global()

    def assign_client_id(self) -> int:
        """Unique cluster-wide: assigning server + restart epoch + counter."""
        self._next_client += 1
        return (self.sid << 48) | (self._client_epoch << 32) | self._next_client

    # -- dispatch ---------------------------------------------------------------

    def on_message(self, env: Envelope) -> None:
        self._trace("msg.recv", type=env.msg_type.name, tranx=env.tranx, frm=env.sender_id)
        self._crash_point(f"recv.{env.msg_type.name}")
        mt = env.msg_type
        if mt == MsgType.CLIENT_HELLO:
            self._reply(env, self.assign_client_id().to_bytes(8, "little"))
        elif mt == MsgType.READ:
            self._handle_read(env)
        elif mt == MsgType.COMMIT:
            self._handle_commit(env)
        elif mt == MsgType.PREPARE:
            self._handle_prepare(env)
        elif mt == MsgType.READY:
            self._handle_vote(env, yes=True)
        elif mt == MsgType.ABORT_DECISION and env.tranx and env.tranx.coordinator == self.sid:
            self._handle_vote(env, yes=False)
        elif mt in (MsgType.COMMIT_DECISION, MsgType.ABORT_DECISION):
            decision = "Commit" if mt == MsgType.COMMIT_DECISION else "Abort"
            tranxes = [env.tranx] if env.tranx else rpc.dec_tranx_list(env.payload)
            acked = []
            for t in tranxes:
                if self._handle_decision(t, decision):
                    acked.append(t)
            if acked:
                self._send(
                    env.sender_id,
                    self._server_env(MsgType.ACK, None, rpc.enc_tranx_list(acked)),
                )
        elif mt == MsgType.ACK:
            for t in rpc.dec_tranx_list(env.payload):
                self._handle_ack(t, env.sender_id)
        elif mt == MsgType.GC_LC:
            self.gc.on_lc_broadcast(env.sender_id, rpc.dec_gc_lc(env.payload))
            self.dedup.prune(self.gc.table)
        elif mt == MsgType.TRANX_STATUS:
            self._handle_status_query(env)
        elif mt == MsgType.RESPONSE:
            self._handle_status_response(env)

    # -- reads -----------------------------------------------------------------

    def _handle_read(self, env: Envelope) -> None:
        # Idempotent, lock-free, never deduplicated.
        key = rpc.dec_read_req(env.payload)
        self.stats["reads"] += 1
        self._reply(env, rpc.enc_read_resp(self.storage.get(key)))

    # -- coordinator -------------------------------------------------------------

    def _handle_commit(self, env: Envelope) -> None:
        cached = self.dedup.check_client(env.sender_id, env.message_id)
        if cached is not None:
            self._reply(env, cached)
            return
        key = (env.sender_id, env.message_id)
        if key in self.pending_client:
            # duplicate while in flight: refresh the reply target, answer later
            rec = self.coord.get(self.pending_client[key])
            if rec is not None:
                rec.reply_to = env
            return
        try:
            txn = rpc.dec_commit_req(env.payload)
        except Exception:
            self._reply(env, rpc.enc_commit_resp(False, AbortReason.UNKNOWN, []))
            return
        if txn.is_empty():
            self._reply(env, rpc.enc_commit_resp(False, AbortReason.UNKNOWN, []))
            return
        # admission bound: every log record derived from this transaction
        # (prepare with all slices, a participant's ready record with frozen
        # post-versions) must fit one WAL block, or commit would die midway
        overhead = 8 * len(txn.writes) + 8 * len(self.members) + 64
        if len(env.payload) + overhead > MAX_ENTRY:
            payload = rpc.enc_commit_resp(False, AbortReason.LOG_FAILURE, [])
            self.dedup.record_client(env.sender_id, env.message_id, payload)
            self._reply(env, payload)
            return
        self.coordinate(txn, env)

    def _split(self, txn: Transaction) -> dict[ServerId, SubTranx]:
        per: dict[ServerId, tuple[list, list]] = {}
        for k, ver in txn.reads:
            per.setdefault(owner_of(k, self.members), ([], []))[0].append((k, ver))
        for k, v in txn.writes:
            per.setdefault(owner_of(k, self.members), ([], []))[1].append((k, v))
        return {
            sid: SubTranx(tuple(reads), tuple(writes))
            for sid, (reads, writes) in sorted(per.items())
        }

    def coordinate(self, txn: Transaction, reply_to: Envelope | None) -> TranxID:
        subs = self._split(txn)
        tranx = self.issuer.next()
        rec = CoordRec(tranx, subs)
        rec.reply_to = reply_to
        if reply_to is not None and reply_to.sender_kind == rpc.CLIENT:
            rec.client_key = (reply_to.sender_id, reply_to.message_id)
            self.pending_client[rec.client_key] = tranx
        self.coord[tranx] = rec
        self._trace("coord.state", tranx=tranx, frm=None, to=CoordState.START.value)

        if set(subs) == {self.sid}:
            self._one_phase_commit(rec)
            return tranx

        self._set_coord_state(rec, CoordState.PREPARE)
        rec.pending_ready = set(subs)
        rec.pending_ack = set(subs)
        self._append(
            CoordPrepare(tranx, tuple(sorted(subs.items()))), durable=True
        )
        for sid, sub in subs.items():
            if sid == self.sid:
                continue
            self._send(
                sid,
                self._server_env(MsgType.PREPARE, tranx, rpc.enc_prepare(sub)),
            )
        rec.retry_timer = self.ctx.set_timer(
            self.config.prepare_retry, lambda t=tranx: self._prepare_retry(t)
        )
        if self.sid in subs:
            self._local_prepare(tranx, subs[self.sid])
        return tranx

    def _prepare_retry(self, tranx: TranxID) -> None:
        rec = self.coord.get(tranx)
        if rec is None or rec.decision is not None or not rec.pending_ready:
            return
        rec.retries += 1
        if rec.retries >= self.config.prepare_budget:
            self._decide(rec, "Abort", AbortReason.TIMEOUT, [])
            return
        for sid in rec.pending_ready:
            if sid == self.sid:
                continue
            self._send(
                sid,
                self._server_env(MsgType.PREPARE, tranx, rpc.enc_prepare(rec.subs[sid])),
            )
        rec.retry_timer = self.ctx.set_timer(
            self.config.prepare_retry, lambda t=tranx: self._prepare_retry(t)
        )

    def _handle_vote(self, env: Envelope, yes: bool) -> None:
        tranx = env.tranx
        rec = self.coord.get(tranx)
        if rec is None or rec.decision is not None:
            return
        if yes:
            self._vote(rec, env.sender_id, None, [])
        else:
            reason, piggyback = rpc.dec_vote_abort(env.payload)
            self._vote(rec, env.sender_id, reason or AbortReason.UNKNOWN, piggyback)

    def _vote(self, rec: CoordRec, voter: ServerId, reason, piggyback) -> None:
        if rec.decision is not None or voter not in rec.pending_ready:
            return
        rec.pending_ready.discard(voter)
        if reason is None:
            if not rec.pending_ready:
                self._decide(rec, "Commit", None, [])
        else:
            # abort fan-out goes out immediately, without waiting for the
            # remaining votes
            self._decide(rec, "Abort", reason, piggyback)

    def _decide(self, rec: CoordRec, decision: str, reason, piggyback) -> None:
        assert rec.decision is None
        rec.decision = decision
        rec.abort_reason = reason
        rec.piggyback = list(piggyback)
        if rec.retry_timer is not None:
            self.ctx.cancel_timer(rec.retry_timer)
            rec.retry_timer = None
        kind = CoordCommit if decision == "Commit" else CoordAbort
        self._append(kind(rec.tranx, rec.client_key), durable=True)
        self._set_coord_state(
            rec, CoordState.COMMIT if decision == "Commit" else CoordState.ABORT
        )
        # the client is answered at decision-persist time; participant acks
        # are handled by the batched ack stage afterwards
        self._answer_client(rec)
        remote = [sid for sid in rec.pending_ack if sid != self.sid]
        if decision == "Abort":
            for sid in remote:
                self._send(
                    sid, self._server_env(MsgType.ABORT_DECISION, rec.tranx, b"")
                )
            rec.last_fanout = self.ctx.now()
        else:
            for sid in remote:
                self._enqueue_decision(sid, rec.tranx, decision)
        if self.sid in rec.pending_ack:
            if self._handle_decision(rec.tranx, decision):
                self._handle_ack(rec.tranx, self.sid)
        if not rec.complete:
            self._undelivered.add(rec.tranx)

    def _answer_client(self, rec: CoordRec) -> None:
        if rec.reply_to is None:
            return
        committed = rec.decision == "Commit"
        payload = rpc.enc_commit_resp(committed, rec.abort_reason, rec.piggyback)
        self.stats["commits" if committed else "aborts"] += 1
        if rec.client_key is not None:
            self.dedup.record_client(rec.client_key[0], rec.client_key[1], payload)
            self.pending_client.pop(rec.client_key, None)
        self._reply(rec.reply_to, payload)
        rec.reply_to = None

    def _handle_ack(self, tranx: TranxID, sender: ServerId) -> None:
        rec = self.coord.get(tranx)
        if rec is None or rec.decision is None:
            return
        rec.pending_ack.discard(sender)
        if not rec.pending_ack and not rec.complete:
            rec.complete = True
            self._undelivered.discard(tranx)
            self.gc.mark_complete(tranx, rec.decision)

    # -- one-phase path -----------------------------------------------------------

    def _one_phase_commit(self, rec: CoordRec) -> None:
        self.stats["one_phase"] += 1
        self._set_coord_state(rec, CoordState.PREPARE)
        sub = rec.subs[self.sid]
        shared = [k for k, _ in sub.reads if k not in {w for w, _ in sub.writes}]
        exclusive = [k for k, _ in sub.writes]
        self.locks.acquire_for_prepare(
            rec.tranx,
            shared,
            exclusive,
            lambda ok, why, r=rec: self._one_phase_locked(r, ok, why),
        )

    def _one_phase_locked(self, rec: CoordRec, granted: bool, why) -> None:
        sub = rec.subs[self.sid]
        if not granted:
            self._finish_one_phase(rec, self._map_lock_reason(why), [])
            return
        stale = self._validate_reads(sub.reads)
        if stale:
            self.locks.release_all(rec.tranx)
            self._finish_one_phase(rec, AbortReason.STALE_READ, self._piggyback(stale))
            return
        writes = tuple(
            (k, v, self.storage.current_version(k) + 1) for k, v in sub.writes
        )
        # combined record: write set + decision in a single durable flush
        if writes:
            self.tranxlog.append(PartReady(rec.tranx, sub.reads, writes), durable=False)
        self._append(CoordCommit(rec.tranx, rec.client_key), durable=True)
        self._set_coord_state(rec, CoordState.COMMIT)
        rec.decision = "Commit"
        if writes:
            self.storage.apply_writes(list(writes))
            self._trace("part.apply", tranx=rec.tranx, writes=writes)
        self.locks.release_all(rec.tranx)
        rec.complete = True
        self.gc.mark_complete(rec.tranx, "Commit")
        self._answer_client(rec)

    def _finish_one_phase(self, rec: CoordRec, reason: AbortReason, piggyback) -> None:
        self._append(CoordAbort(rec.tranx, rec.client_key), durable=True)
        self._set_coord_state(rec, CoordState.ABORT)
        rec.decision = "Abort"
        rec.abort_reason = reason
        rec.piggyback = piggyback
        rec.complete = True
        self.gc.mark_complete(rec.tranx, "Abort")
        self._answer_client(rec)

    # -- participant ----------------------------------------------------------------

    @staticmethod
    def _map_lock_reason(why: RejectReason) -> AbortReason:
        return {
            RejectReason.SHARED_DENIED: AbortReason.LOCK_DENIED_READ,
            RejectReason.EXCLUSIVE_DENIED: AbortReason.LOCK_DENIED_WRITE,
            RejectReason.WAIT_TIMEOUT: AbortReason.LOCK_DENIED_WRITE,
            RejectReason.ALREADY_ABORTED: AbortReason.ALREADY_ABORTED,
        }[why]

    def _validate_reads(self, reads) -> list[bytes]:
        """Keys whose stored version no longer matches the observed one."""
        return [
            k for k, ver in reads if self.storage.current_version(k) != ver
        ]

    def _piggyback(self, keys) -> list[tuple[bytes, bytes, int]]:
        out = []
        for k in keys:
            entry = self.storage.get(k)
            if entry is not None:
                out.append((k, entry[0], entry[1]))
        return out

    def _handle_prepare(self, env: Envelope) -> None:
        tranx = env.tranx
        cached = self.dedup.check_tranx(tranx, MsgType.PREPARE)
        if cached is not None:
            self._send_vote_bytes(tranx, cached)
            return
        if self.gc.is_final_by_watermark(tranx):
            return  # long decided and reclaimed; the coordinator needs nothing
        if (
            tranx in self.locks.aborted
            or self.dedup.seen_tranx(tranx, MsgType.ABORT_DECISION)
            or self.dedup.seen_tranx(tranx, MsgType.COMMIT_DECISION)
        ):
            # the decision overtook this prepare on the wire; preparing now
            # would grant locks no decision will ever release
            return
        if tranx in self.part:
            return  # duplicate while the first prepare is still in flight
        sub = rpc.dec_prepare(env.payload)
        self._local_prepare(tranx, sub)

    def _local_prepare(self, tranx: TranxID, sub: SubTranx) -> None:
        rec = PartRec(tranx, sub.reads)
        self.part[tranx] = rec
        self._trace("part.state", tranx=tranx, frm=None, to=PartState.START.value)
        written = {k for k, _ in sub.writes}
        shared = [k for k, _ in sub.reads if k not in written]
        self.locks.acquire_for_prepare(
            tranx,
            shared,
            sorted(written),
            lambda ok, why, t=tranx, s=sub: self._prepare_locked(t, s, ok, why),
        )

    def _prepare_locked(self, tranx: TranxID, sub: SubTranx, granted: bool, why) -> None:
        rec = self.part.get(tranx)
        if rec is None or rec.state != PartState.START:
            return  # a concurrent abort decision already settled this one
        if not granted:
            self._prepare_abort(rec, self._map_lock_reason(why), [])
            return
        stale = self._validate_reads(sub.reads)
        if stale:
            self.locks.release_all(tranx)
            self._prepare_abort(rec, AbortReason.STALE_READ, self._piggyback(stale))
            return
        writes = tuple(
            (k, v, self.storage.current_version(k) + 1) for k, v in sub.writes
        )
        rec.writes = writes
        self._append(PartReady(tranx, sub.reads, writes), durable=True)
        self._set_part_state(rec, PartState.READY)
        vote = b""
        self.dedup.record_tranx(tranx, MsgType.PREPARE, vote)
        self._send_vote_bytes(tranx, vote)

    def _prepare_abort(self, rec: PartRec, reason: AbortReason, piggyback) -> None:
        tranx = rec.tranx
        self._append(PartAbort(tranx), durable=False)
        self._set_part_state(rec, PartState.ABORT)
        self.locks.record_abort(tranx)
        vote = rpc.enc_vote_abort(reason, piggyback)
        self.dedup.record_tranx(tranx, MsgType.PREPARE, vote)
        self._send_vote_bytes(tranx, vote)

    def _send_vote_bytes(self, tranx: TranxID, vote: bytes) -> None:
        """Empty vote payload means Ready; otherwise an abort vote."""
        coordinator = tranx.coordinator
        if vote == b"":
            env_type, payload = MsgType.READY, b""
        else:
            env_type, payload = MsgType.ABORT_DECISION, vote
        if coordinator == self.sid:
            rec = self.coord.get(tranx)
            if rec is not None and rec.decision is None:
                if env_type == MsgType.READY:
                    self._vote(rec, self.sid, None, [])
                else:
                    reason, piggyback = rpc.dec_vote_abort(vote)
                    self._vote(rec, self.sid, reason or AbortReason.UNKNOWN, piggyback)
            return
        self._send(coordinator, self._server_env(env_type, tranx, payload))

    def _handle_decision(self, tranx: TranxID, decision: str) -> bool:
        """Apply a commit/abort decision; returns True when an ack is owed."""
        mt = MsgType.COMMIT_DECISION if decision == "Commit" else MsgType.ABORT_DECISION
        if self.dedup.seen_tranx(tranx, mt):
            return True  # replay: ack again, no side effects
        if self.gc.is_final_by_watermark(tranx):
            return True
        rec = self.part.get(tranx)
        if decision == "Commit":
            assert rec is not None and rec.state == PartState.READY, (
                f"commit decision for {tranx} without a ready record"
            )
            self._append(PartCommit(tranx), durable=True)
            self._set_part_state(rec, PartState.COMMIT)
            if rec.writes:
                self.storage.apply_writes(list(rec.writes))
                self._trace("part.apply", tranx=tranx, writes=rec.writes)
            self.locks.release_all(tranx)
        else:
            self._append(PartAbort(tranx), durable=False)
            if rec is not None and rec.state in (PartState.START, PartState.READY):
                self._set_part_state(rec, PartState.ABORT)
            self.locks.record_abort(tranx)
        self.dedup.record_tranx(tranx, mt)
        return True

    # -- batched ack stage -------------------------------------------------------------

    def _enqueue_decision(self, dest: ServerId, tranx: TranxID, decision: str) -> None:
        self._ack_batches.setdefault(dest, {"Commit": [], "Abort": []})[decision].append(tranx)

    def _ack_tick(self) -> None:
        self._flush_ack_batches()
        self._resend_undelivered()
        self.ctx.set_timer(self.config.ack_flush_period, self._ack_tick)

    def _flush_ack_batches(self) -> None:
        batches, self._ack_batches = self._ack_batches, {}
        for dest, by_decision in batches.items():
            for decision, tranxes in by_decision.items():
                if not tranxes:
                    continue
                mt = (
                    MsgType.COMMIT_DECISION
                    if decision == "Commit"
                    else MsgType.ABORT_DECISION
                )
                self._send(dest, self._server_env(mt, None, rpc.enc_tranx_list(tranxes)))
                for t in tranxes:
                    rec = self.coord.get(t)
                    if rec is not None:
                        rec.last_fanout = self.ctx.now()

    def _resend_undelivered(self) -> None:
        now = self.ctx.now()
        for tranx in list(self._undelivered):
            rec = self.coord.get(tranx)
            if rec is None or rec.decision is None or rec.complete:
                self._undelivered.discard(tranx)
                continue
            if rec.last_fanout < 0 or now - rec.last_fanout < self.config.decision_resend:
                continue
            for sid in rec.pending_ack:
                if sid != self.sid:
                    self._enqueue_decision(sid, rec.tranx, rec.decision)
            rec.last_fanout = now

    # -- gc stage ------------------------------------------------------------------------

    def _broadcast_lc(self, lc_seq: int) -> None:
        for sid in self.peers:
            self._send(sid, self._server_env(MsgType.GC_LC, None, rpc.enc_gc_lc(lc_seq)))

    def _gc_tick(self) -> None:
        self.gc.tick()
        self.dedup.prune(self.gc.table)
        self.gc.delayed_volatile_reclaim(self._light_load())
        self._reclaim_records()
        self.ctx.set_timer(self.config.gc_period, self._gc_tick)

    def _light_load(self) -> bool:
        in_flight = sum(1 for r in self.coord.values() if not r.complete)
        in_flight += sum(
            1 for r in self.part.values() if r.state in (PartState.START, PartState.READY)
        )
        return in_flight == 0

    def _reclaim_records(self) -> None:
        lc = self.gc.table
        self.coord = {
            t: r for t, r in self.coord.items() if not r.complete or t.seq > lc.get(t.coordinator, 0)
        }
        self.part = {
            t: r
            for t, r in self.part.items()
            if r.state in (PartState.START, PartState.READY)
            or t.seq > lc.get(t.coordinator, 0)
        }

    # -- status queries (global recovery) ---------------------------------------------------

    def _handle_status_query(self, env: Envelope) -> None:
        tranx = env.tranx
        status = "Abort"
        if tranx in self.gc.final:
            status = self.gc.final[tranx]
        elif tranx in self.coord:
            rec = self.coord[tranx]
            status = rec.decision or "Pending"
        elif self.gc.is_final_by_watermark(tranx):
            # Can only happen once every participant acked, i.e. the querier
            # already applied the decision and lost the query race; by then
            # it is never in Ready, so Abort is safe for a truly unknown id.
            status = "Abort"
        self._reply(env, rpc.enc_status_resp(status))

    def _query_status(self, tranx: TranxID) -> None:
        if tranx not in self.part or self.part[tranx].state != PartState.READY:
            return
        msg_id = self._next_msg_id()
        self._pending_status[msg_id] = tranx
        env = Envelope(MsgType.TRANX_STATUS, rpc.SERVER, self.sid, msg_id, tranx, b"")
        self._send(tranx.coordinator, env)
        self.ctx.set_timer(
            self.config.status_retry,
            lambda t=tranx, m=msg_id: self._status_retry(t, m),
        )

    def _status_retry(self, tranx: TranxID, msg_id: int) -> None:
        if msg_id in self._pending_status:
            self._pending_status.pop(msg_id, None)
            self._query_status(tranx)

    def _handle_status_response(self, env: Envelope) -> None:
        tranx = self._pending_status.pop(env.message_id, None)
        if tranx is None:
            return
        status = rpc.dec_status_resp(env.payload)
        if status == "Pending":
            self.ctx.set_timer(
                self.config.status_retry, lambda t=tranx: self._query_status(t)
            )
            return
        if self._handle_decision(tranx, status):
            self._send(
                tranx.coordinator,
                self._server_env(MsgType.ACK, None, rpc.enc_tranx_list([tranx])),
            )

    # -- recovery ---------------------------------------------------------------------------

    def recover_local(self) -> dict:
        """Fold the WAL into volatile state; returns a summary for diagnostics."""
        coord_state: dict[TranxID, str] = {}
        coord_parts: dict[TranxID, tuple] = {}
        part_ready: dict[TranxID, PartReady] = {}
        part_state: dict[TranxID, str] = {}
        coord_client: dict[TranxID, tuple[int, int] | None] = {}
        own_seqs: set[int] = set()
        for recd in self.tranxlog.scan():
            t = recd.tranx
            if isinstance(recd, CoordPrepare):
                coord_state[t] = "Prepare"
                coord_parts[t] = recd.participants
                own_seqs.add(t.seq)
            elif isinstance(recd, CoordCommit):
                coord_state[t] = "Commit"
                coord_client[t] = recd.client
                own_seqs.add(t.seq)
            elif isinstance(recd, CoordAbort):
                coord_state[t] = "Abort"
                coord_client[t] = recd.client
                own_seqs.add(t.seq)
            elif isinstance(recd, PartReady):
                part_ready[t] = recd
                part_state[t] = "Ready"
            elif isinstance(recd, PartCommit):
                part_state[t] = "Commit"
            elif isinstance(recd, PartAbort):
                part_state[t] = "Abort"

        base_lc = self.gc.table.get(self.sid, 0)
        max_seq = max(own_seqs, default=0)
        max_seq = max(max_seq, base_lc)
        self.issuer = TranxIdIssuer(self.sid, max_seq)
        self.gc.issued_max_fn = lambda: self.issuer.last_issued

        # fill crash gaps in the TranxID space with aborts so the watermark
        # prefix can advance past them
        for seq in range(base_lc + 1, max_seq + 1):
            t = TranxID(self.sid, seq)
            if seq not in own_seqs:
                self._append(CoordAbort(t), durable=True)
                coord_state[t] = "Abort"
                coord_parts.setdefault(t, ())

        # participant side: replay decisions, re-lock in-doubt ready slices
        in_doubt_participant: list[TranxID] = []
        for t, ready in sorted(part_ready.items()):
            state = part_state.get(t)
            if state == "Ready" and t.coordinator == self.sid:
                # own slice (1PC or self-participation): the coordinator's
                # decision, when logged, settles it locally
                if coord_state.get(t) in ("Commit", "Abort"):
                    state = coord_state[t]
            if state == "Commit":
                self.storage.apply_writes(
                    [(k, v, pv) for k, v, pv in ready.writes], replay=True
                )
                self.dedup.record_tranx(t, MsgType.COMMIT_DECISION)
                self.dedup.record_tranx(t, MsgType.PREPARE, b"")
            elif state == "Abort":
                self.locks.record_abort(t)
                self.dedup.record_tranx(t, MsgType.ABORT_DECISION)
            else:
                rec = PartRec(t, ready.reads, ready.writes, PartState.START)
                self.part[t] = rec
                written = {k for k, _, _ in ready.writes}
                shared = [k for k, _ in ready.reads if k not in written]
                result: list = []
                self.locks.acquire_for_prepare(
                    t, shared, sorted(written), lambda ok, why: result.append(ok)
                )
                assert result and result[0], f"recovery re-lock failed for {t}"
                rec.state = PartState.READY
                self.dedup.record_tranx(t, MsgType.PREPARE, b"")
                if t.coordinator != self.sid:
                    in_doubt_participant.append(t)
        for t, state in sorted(part_state.items()):
            if t not in part_ready and state == "Abort":
                self.locks.record_abort(t)
                self.dedup.record_tranx(t, MsgType.ABORT_DECISION)

        # coordinator side: resume fan-out for decided, re-abort in-doubt
        self._in_doubt_coord: list[TranxID] = []
        for t, state in sorted(coord_state.items()):
            if t.seq <= base_lc:
                continue
            participants = dict(coord_parts.get(t, ()))
            rec = CoordRec(t, {sid: sub for sid, sub in participants.items()})
            rec.state = {
                "Prepare": CoordState.PREPARE,
                "Commit": CoordState.COMMIT,
                "Abort": CoordState.ABORT,
            }[state]
            self.coord[t] = rec
            if state == "Prepare":
                rec.pending_ready = set(participants)
                rec.pending_ack = set(participants)
                self._in_doubt_coord.append(t)
                continue
            rec.decision = state
            remote = [sid for sid in participants if sid != self.sid]
            rec.pending_ack = set(remote)
            local_state = part_state.get(t)
            if self.sid in participants or local_state is not None:
                # the local slice was replayed above; self-ack is implicit
                pass
            if not remote:
                rec.complete = True
                self.gc.mark_complete(t, state)
            else:
                for sid in remote:
                    self._enqueue_decision(sid, t, state)
                self._undelivered.add(t)

        # rebuild the client-request dedup window for decided transactions so
        # a resent commit request gets the original answer instead of being
        # re-executed as a fresh transaction
        for t, ck in sorted(coord_client.items()):
            if ck is None:
                continue
            if coord_state.get(t) == "Commit":
                payload = rpc.enc_commit_resp(True, None, [])
            else:
                payload = rpc.enc_commit_resp(False, AbortReason.ALREADY_ABORTED, [])
            self.dedup.record_client(ck[0], ck[1], payload)

        self.gc.table[self.sid] = self.gc.tracker.lc
        self._client_epoch = self._bump_epoch()
        self.recovered = True
        self._trace(
            "recovered",
            coord=len(coord_state),
            in_doubt_coord=len(self._in_doubt_coord),
            in_doubt_part=len(in_doubt_participant),
        )
        self._in_doubt_participant = in_doubt_participant
        return {
            "in_doubt_coord": list(self._in_doubt_coord),
            "in_doubt_participant": list(in_doubt_participant),
            "max_seq": max_seq,
        }

    def _bump_epoch(self) -> int:
        raw = self.env.get_blob("epoch")
        epoch = int(raw.decode()) + 1 if raw else 1
        self.env.put_blob("epoch", str(epoch).encode())
        return epoch

    def recover_global(self) -> None:
        """Resolve in-doubt transactions; runs after service stages start."""
        for t in self._in_doubt_coord:
            rec = self.coord[t]
            if rec.decision is not None:
                continue
            # silence means failure to the client: abort even if every
            # participant turned out to be ready
            self._decide(rec, "Abort", AbortReason.UNKNOWN, [])
        self._in_doubt_coord = []
        for t in self._in_doubt_participant:
            self._query_status(t)
        self._in_doubt_participant = []

    # -- operator surface -----------------------------------------------------------------------

    def stats_dump(self) -> dict:
        return {
            **self.stats,
            "lock": self.locks.stats(),
            "dedup_entries": self.dedup.size(),
            "wal_files": self.tranxlog.file_count(),
            "lc": dict(self.gc.table),
            "in_flight_coord": sum(1 for r in self.coord.values() if not r.complete),
        }

    def shutdown(self) -> None:
        self.tranxlog.close()
        self.storage.store.close()
