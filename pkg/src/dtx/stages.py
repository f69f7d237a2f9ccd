"""Staged execution runtime: named stages, bounded queues, pooled events.

A stage is a bounded multi-producer queue plus a fixed set of handler
threads (optionally pinned to CPU cores).  Three categories exist by
convention: Service stages face the network, Internal stages run protocol
steps (single-threaded where the code assumes a single writer, e.g. the
log and the lock service), Daemon stages run periodic work.

Queues are striped: each stage owns several sub-queues, producers stripe
across them round-robin, and consumer threads scan them round-robin.
FIFO holds per sub-queue; cross-stripe order is not promised.  enqueue
never blocks: a full stripe answers Backpressure immediately and the
caller decides (retry, shed, or push back further upstream).

Events are pooled to avoid allocation churn; the pool asserts on a
double-put or a foreign element.
"""

from __future__ import annotations

import enum
import itertools
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


class EnqueueResult(enum.Enum):
    ACCEPTED = "accepted"
    BACKPRESSURE = "backpressure"
    REJECTED = "rejected"  # stage shut down


class StageCategory(enum.Enum):
    SERVICE = "Service"
    INTERNAL = "Internal"
    DAEMON = "Daemon"


@dataclass
class StageSpec:
    name: str
    category: StageCategory
    thread_count: int = 1
    dynamic_threads: bool = False
    core_binding: list[int] | None = None
    queue_capacity: int = 1024

    def __post_init__(self) -> None:
        if self.thread_count < 1:
            raise ValueError("thread_count must be positive")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be positive")
        if self.core_binding is not None and len(self.core_binding) != self.thread_count:
            raise ValueError("core_binding length must equal thread_count")


@dataclass
class Event:
    payload: object = None
    source: str | None = None
    enqueued_at: float = 0.0
    _in_pool: bool = True
    _pool: object = None


class ElementPool:
    """Free list of Event objects with double-put detection."""

    def __init__(self) -> None:
        self._free: list[Event] = []
        self._lock = threading.Lock()
        self.allocated = 0
        self.reused = 0

    def get(self) -> Event:
        with self._lock:
            if self._free:
                ev = self._free.pop()
                self.reused += 1
            else:
                ev = Event(_pool=self)
                self.allocated += 1
        ev._in_pool = False
        ev.payload = None
        ev.source = None
        return ev

    def put(self, ev: Event) -> None:
        assert ev._pool is self, "put of an element from a different pool"
        with self._lock:
            assert not ev._in_pool, "double put"
            ev._in_pool = True
            ev.payload = None
            self._free.append(ev)

    def outstanding(self) -> int:
        with self._lock:
            return self.allocated - len(self._free)


def bind_thread_to_core(core: int) -> bool:
    """Pin the calling thread to one core; False (with a warning) when the
    platform has no affinity support."""
    if core < 0 or core >= (os.cpu_count() or 1):
        raise ValueError(f"core index {core} out of range")
    try:
        os.sched_setaffinity(0, {core})
        return True
    except (AttributeError, OSError) as exc:
        log.warning("core binding unavailable (%s); continuing unpinned", exc)
        return False


class _Stripe:
    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self.items: deque = deque()
        self.lock = threading.Lock()


class Stage:
    def __init__(self, spec: StageSpec, handler) -> None:
        self.spec = spec
        self.handler = handler
        stripes = max(1, spec.thread_count)
        per = max(1, spec.queue_capacity // stripes)
        self.stripes = [_Stripe(per) for _ in range(stripes)]
        self._rr = itertools.count()
        self._cond = threading.Condition()
        self.running = False
        self.stopping = False
        self.drain_on_stop = True
        self.processed = 0
        self.backpressured = 0
        self.threads: list[threading.Thread] = []
        self._busy = 0
        self._max_threads = spec.thread_count * 4 if spec.dynamic_threads else spec.thread_count

    def enqueue(self, ev: Event) -> EnqueueResult:
        if not self.running or self.stopping:
            return EnqueueResult.REJECTED
        stripe = self.stripes[next(self._rr) % len(self.stripes)]
        with stripe.lock:
            if len(stripe.items) >= stripe.capacity:
                self.backpressured += 1
                return EnqueueResult.BACKPRESSURE
            ev.enqueued_at = time.monotonic()
            stripe.items.append(ev)
        with self._cond:
            self._cond.notify()
            if (
                self.spec.dynamic_threads
                and self._busy >= len(self.threads)
                and len(self.threads) < self._max_threads
            ):
                self._spawn(len(self.threads))
        return EnqueueResult.ACCEPTED

    def depth(self) -> int:
        total = 0
        for s in self.stripes:
            with s.lock:
                total += len(s.items)
        return total

    def _take(self, start: int) -> Event | None:
        for i in range(len(self.stripes)):
            s = self.stripes[(start + i) % len(self.stripes)]
            with s.lock:
                if s.items:
                    return s.items.popleft()
        return None

    def _loop(self, idx: int) -> None:
        binding = self.spec.core_binding
        if binding is not None and idx < len(binding):
            bind_thread_to_core(binding[idx])
        while True:
            ev = self._take(idx)
            if ev is None:
                if self.stopping:
                    return
                with self._cond:
                    self._cond.wait(timeout=0.01)
                continue
            with self._cond:
                self._busy += 1
            try:
                self.handler(ev)
            finally:
                with self._cond:
                    self._busy -= 1
                self.processed += 1

    def _spawn(self, idx: int) -> None:
        t = threading.Thread(target=self._loop, args=(idx,), daemon=True, name=f"stage-{self.spec.name}-{idx}")
        self.threads.append(t)
        t.start()

    def start(self) -> None:
        self.running = True
        for i in range(self.spec.thread_count):
            self._spawn(i)

    def stop(self, drain: bool) -> int:
        """Returns the number of discarded events (0 when draining)."""
        if drain:
            while self.depth() > 0:
                time.sleep(0.001)
        self.stopping = True
        with self._cond:
            self._cond.notify_all()
        for t in self.threads:
            t.join(timeout=5.0)
        discarded = 0
        for s in self.stripes:
            with s.lock:
                discarded += len(s.items)
                s.items.clear()
        self.running = False
        return discarded

    def stats(self) -> dict:
        return {
            "depth": self.depth(),
            "processed": self.processed,
            "backpressured": self.backpressured,
            "threads": len(self.threads),
        }


class StageRuntime:
    """Registry + lifecycle for a set of stages sharing one element pool."""

    def __init__(self) -> None:
        self.stages: dict[str, Stage] = {}
        self.pool = ElementPool()
        self.started = False

    def register(self, spec: StageSpec, handler) -> Stage:
        if self.started:
            raise RuntimeError("runtime already started")
        if spec.name in self.stages:
            raise ValueError(f"duplicate stage name {spec.name!r}")
        stage = Stage(spec, handler)
        self.stages[spec.name] = stage
        return stage

    def enqueue(self, name: str, payload: object, source: str | None = None) -> EnqueueResult:
        ev = self.pool.get()
        ev.payload = payload
        ev.source = source
        result = self.stages[name].enqueue(ev)
        if result is not EnqueueResult.ACCEPTED:
            self.pool.put(ev)
        return result

    def start(self) -> None:
        if self.started:
            raise RuntimeError("runtime already started")
        self.started = True
        for stage in self.stages.values():
            stage.start()

    def shutdown(self, drain: bool = True) -> int:
        discarded = 0
        for stage in self.stages.values():
            discarded += stage.stop(drain)
        self.started = False
        return discarded

    def stats(self) -> dict:
        return {
            "stages": {name: s.stats() for name, s in self.stages.items()},
            "pool": {
                "allocated": self.pool.allocated,
                "reused": self.pool.reused,
                "outstanding": self.pool.outstanding(),
            },
        }
