"""State-transition garbage collection.

Each server tracks completion of the transactions it coordinated.  The
largest sequence k such that every one of its transactions 1..k is finally
decided *and acknowledged by every participant* is the server's local
watermark.  Watermarks are persisted in the fixed-size GCLog, broadcast to
peers, and drive both WAL file reclamation and pruning of the lock
service's aborted-id set.

Ordering contract (matters for crash safety): volatile GC state changes
strictly before the GCLog write, the GCLog write before any file
reclamation, and the key-value store is synced before files are deleted so
no applied write depends on a reclaimed record.

GCLog format, bit exact: two halves of identical layout, written
alternately (generation % 2 picks the half), read side takes the valid
half with the larger generation.
  half = generation: u64 LE | slot_count: u32 LE
         | slot_count x (server: u32 LE, seq: u64 LE)
         | crc32: u32 LE over everything before it
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

from .env import NodeEnv
from .model import ServerId, TranxID

GCLOG_NAME = "gclog"


def _half_size(members: int) -> int:
    return 8 + 4 + members * 12 + 4


class GcLog:
    """Fixed-size, double-buffered, atomically overwritten watermark file."""

    def __init__(self, env: NodeEnv, member_ids: list[ServerId]) -> None:
        self.env = env
        self.members = sorted(member_ids)
        self.half = _half_size(len(self.members))
        if env.region_exists(GCLOG_NAME):
            self.region = env.open_region(GCLOG_NAME)
        else:
            self.region = env.create_region(GCLOG_NAME, 2 * self.half)
        self.generation = self._read_generation()

    def _encode_half(self, generation: int, table: dict[ServerId, int]) -> bytes:
        body = struct.pack("<QI", generation, len(self.members))
        for sid in self.members:
            body += struct.pack("<IQ", sid, table.get(sid, 0))
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    def _decode_half(self, data: bytes) -> tuple[int, dict[ServerId, int]] | None:
        body, crc_bytes = data[:-4], data[-4:]
        if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body) & 0xFFFFFFFF:
            return None
        generation, count = struct.unpack_from("<QI", body, 0)
        if count != len(self.members):
            return None
        table = {}
        for i in range(count):
            sid, seq = struct.unpack_from("<IQ", body, 12 + i * 12)
            table[sid] = seq
        return generation, table

    def _read_generation(self) -> int:
        gen, _ = self._read_best()
        return gen

    def _read_best(self) -> tuple[int, dict[ServerId, int]]:
        best = (0, {sid: 0 for sid in self.members})
        for half_idx in (0, 1):
            data = self.region.read_at(half_idx * self.half, self.half)
            decoded = self._decode_half(data)
            if decoded is not None and decoded[0] > best[0]:
                best = decoded
        return best

    def read(self) -> dict[ServerId, int]:
        """Highest-generation valid table; all zeros on a fresh or wrecked file."""
        return dict(self._read_best()[1])

    def write(self, table: dict[ServerId, int]) -> None:
        self.generation += 1
        data = self._encode_half(self.generation, table)
        offset = (self.generation % 2) * self.half
        self.region.write_at(offset, data)
        self.region.persist(offset, len(data))


class CompletionTracker:
    """Contiguous-prefix completion counter with out-of-order spillover."""

    def __init__(self, base: int = 0) -> None:
        self.lc = base  # every seq <= lc is complete
        self._sparse: set[int] = set()

    def mark(self, seq: int, issued_max: int | None = None) -> None:
        if issued_max is not None:
            assert seq <= issued_max, f"completion for unissued seq {seq}"
        if seq <= self.lc or seq in self._sparse:
            return  # idempotent
        self._sparse.add(seq)
        while self.lc + 1 in self._sparse:
            self._sparse.discard(self.lc + 1)
            self.lc += 1


@dataclass
class GcReport:
    lc_local: int
    files_reclaimed: int
    gclog_written: bool
    broadcast: bool


@dataclass
class GcManager:
    """Glue between the tracker, GCLog, WAL reclamation, and lock pruning.

    Single-threaded by contract: tick() and on_lc_broadcast() run on the
    GC stage; mark_complete() calls are funneled there as well.
    """

    server: ServerId
    gclog: GcLog
    tranxlog: object  # TranxLog
    lock_table: object  # LockTable
    store: object  # StorageEngine (synced before reclaiming)
    broadcast_fn: object  # callable(lc_seq: int)
    trace: object = None  # callable(event: str, **info), optional
    table: dict[ServerId, int] = field(default_factory=dict)
    tracker: CompletionTracker = field(default_factory=CompletionTracker)
    # final decisions of transactions this server coordinated, kept volatile
    # for status queries / duplicate decisions until delayed reclamation
    final: dict[TranxID, str] = field(default_factory=dict)
    issued_max_fn: object = None  # callable() -> highest seq issued locally

    def __post_init__(self) -> None:
        self.table = self.gclog.read()
        self.tracker = CompletionTracker(self.table.get(self.server, 0))

    def _emit(self, event: str, **info) -> None:
        if self.trace is not None:
            self.trace(event, **info)

    def mark_complete(self, tranx: TranxID, final: str) -> None:
        """Record a finally-agreed transaction this server coordinated."""
        assert tranx.coordinator == self.server
        assert final in ("Commit", "Abort")
        issued = self.issued_max_fn() if self.issued_max_fn else None
        self.tracker.mark(tranx.seq, issued)
        self.final[tranx] = final
        self._emit("gc.volatile", tranx=tranx, final=final, lc=self.tracker.lc)

    def tick(self) -> GcReport:
        """Periodic coordinator-side pass, in the mandated order."""
        self.table[self.server] = self.tracker.lc  # (1) snapshot volatile state
        self.gclog.write(self.table)  # (2) persist
        self._emit("gc.gclog", table=dict(self.table))
        self.store.sync()
        reclaimed = self.tranxlog.reclaim_oldest(self.table)  # (3) reclaim
        if reclaimed:
            self._emit("gc.reclaim", files=reclaimed)
        self.lock_table.prune_aborted(dict(self.table))
        self.broadcast_fn(self.tracker.lc)  # (4) broadcast, fire-and-forget
        return GcReport(self.tracker.lc, reclaimed, True, True)

    def on_lc_broadcast(self, sender: ServerId, lc_seq: int) -> bool:
        """Participant-side watermark intake; stale or unknown senders ignored."""
        if sender not in self.table:
            return False
        if lc_seq <= self.table[sender]:
            return False
        self.table[sender] = lc_seq
        self.gclog.write(self.table)
        self._emit("gc.gclog", table=dict(self.table))
        self.store.sync()
        reclaimed = self.tranxlog.reclaim_oldest(self.table)
        if reclaimed:
            self._emit("gc.reclaim", files=reclaimed)
        self.lock_table.prune_aborted(dict(self.table))
        return True

    def delayed_volatile_reclaim(self, light_load: bool) -> int:
        """Free final-state entries covered by the watermark, only when idle."""
        if not light_load:
            return 0
        before = len(self.final)
        self.final = {
            t: d for t, d in self.final.items() if t.seq > self.table.get(t.coordinator, 0)
        }
        return before - len(self.final)

    def is_final_by_watermark(self, tranx: TranxID) -> bool:
        return tranx.seq <= self.table.get(tranx.coordinator, 0)
