"""Real-socket runtime: framed TCP transport around the same ServerNode.

Topology: every server accepts inbound connections (from clients and from
peers) and opens write-only outbound connections to peers on demand.
Replies to clients go back on the inbound connection the request arrived
on; replies to servers travel through the normal outbound channel, exactly
as in the simulator, so the protocol code cannot tell the difference.

Threading: reader threads parse frames and enqueue work onto a
single-threaded protocol stage (the node's state machines assume one
writer); a scheduler thread funnels timer callbacks onto the same stage.
"""

from __future__ import annotations

import heapq
import logging
import socket
import struct
import threading
import time
from collections import OrderedDict

from . import rpc
from .client import BlockingClient, ClientState
from .env import DiskEnv
from .rpc import Envelope, FrameError, MsgType
from .server import ServerConfig, ServerNode
from .stages import StageCategory, StageRuntime, StageSpec
from .storage import FileKvStore
from .workload import ClusterConfig

log = logging.getLogger(__name__)

_BACKENDS = {"mapped-flush": "mapped", "file-sync": "file"}


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


def send_frame(sock: socket.socket, lock: threading.Lock, env: Envelope) -> None:
    data = rpc.frame_encode(env)
    with lock:
        sock.sendall(data)


def recv_frame(sock: socket.socket) -> Envelope | None:
    """One framed envelope, or None on clean EOF."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (n,) = struct.unpack("<I", header)
    if n > rpc.MAX_FRAME:
        raise FrameError(f"frame length {n} exceeds limit")
    body = _read_exact(sock, n)
    if body is None:
        raise FrameError("connection closed mid-frame")
    return rpc.frame_decode(header + body)


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class _Timer:
    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False


class _Scheduler:
    """Dedicated thread firing timer callbacks through a sink callable."""

    def __init__(self, sink) -> None:
        self._sink = sink
        self._heap: list = []
        self._seq = 0
        self._cond = threading.Condition()
        self._stop = False
        self._thread = threading.Thread(target=self._loop, daemon=True, name="dtx-timer")
        self._thread.start()

    def set_timer(self, delay: float, fn) -> _Timer:
        handle = _Timer()
        with self._cond:
            self._seq += 1
            heapq.heappush(self._heap, (time.monotonic() + delay, self._seq, handle, fn))
            self._cond.notify()
        return handle

    @staticmethod
    def cancel_timer(handle: _Timer) -> None:
        handle.cancelled = True

    def _loop(self) -> None:
        while True:
            with self._cond:
                while not self._stop and (
                    not self._heap or self._heap[0][0] > time.monotonic()
                ):
                    timeout = (
                        self._heap[0][0] - time.monotonic() if self._heap else None
                    )
                    self._cond.wait(timeout=max(0.0, timeout) if timeout is not None else None)
                if self._stop:
                    return
                _, _, handle, fn = heapq.heappop(self._heap)
            if not handle.cancelled:
                self._sink(fn)

    def stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify()
        self._thread.join(timeout=2.0)


class ServerRuntime:
    """One server process: sockets + stages + scheduler around a ServerNode."""

    PROTOCOL_STAGE = "protocol"

    def __init__(self, cluster: ClusterConfig, sid: int, data_dir: str | None = None) -> None:
        self.cluster = cluster
        self.sid = sid
        self.addr = _parse_addr(cluster.address_of(sid))
        root = data_dir or f"{cluster.data_dir}/server-{sid}"
        self.env = DiskEnv(root, backend=_BACKENDS[cluster.backend])
        self.store = FileKvStore(root)
        self._conn_locks: dict[socket.socket, threading.Lock] = {}
        self._outbound: dict[int, tuple[socket.socket, threading.Lock]] = {}
        self._reply_conns: OrderedDict = OrderedDict()  # (sender_id, msg_id) -> conn
        self._lock = threading.Lock()
        self._stopping = False

        self.stages = StageRuntime()
        spec = StageSpec(self.PROTOCOL_STAGE, StageCategory.INTERNAL, thread_count=1)
        for s in cluster.stages:
            if s.name == self.PROTOCOL_STAGE:
                if s.threads != 1:
                    raise ValueError("protocol stage is single-writer; threads must be 1")
                spec.core_binding = [s.cores[0]] if s.cores else None
        self.stages.register(spec, self._handle_event)
        self.scheduler = _Scheduler(self._submit)

        config = ServerConfig(
            members=list(cluster.member_ids),
            wal_file_capacity=cluster.wal_file_capacity,
            lock_wait=cluster.lock_wait,
            gc_period=cluster.gc_period,
        )
        self.node = ServerNode(sid, config, self.env, self.store, self)
        self._listener: socket.socket | None = None

    # -- ctx interface used by ServerNode ------------------------------------

    def now(self) -> float:
        return time.monotonic()

    def set_timer(self, delay: float, fn) -> _Timer:
        return self.scheduler.set_timer(delay, fn)

    def cancel_timer(self, handle: _Timer) -> None:
        self.scheduler.cancel_timer(handle)

    def send(self, dest: int, env: Envelope) -> None:
        try:
            sock, lock = self._peer_conn(dest)
            send_frame(sock, lock, env)
        except OSError:
            with self._lock:
                self._outbound.pop(dest, None)  # reconnect on next send

    def reply(self, request: Envelope, resp: Envelope) -> None:
        if request.sender_kind == rpc.SERVER:
            self.send(request.sender_id, resp)
            return
        with self._lock:
            conn = self._reply_conns.pop((request.sender_id, request.message_id), None)
        if conn is None:
            return  # requester gone; its retry will re-register
        sock, lock = conn
        try:
            send_frame(sock, lock, resp)
        except OSError:
            pass

    # -- plumbing ---------------------------------------------------------------

    def _submit(self, fn) -> None:
        from .stages import EnqueueResult

        while self.stages.enqueue(self.PROTOCOL_STAGE, fn) is EnqueueResult.BACKPRESSURE:
            time.sleep(0.0005)  # push back on the producer thread

    def _handle_event(self, ev) -> None:
        fn = ev.payload
        self.stages.pool.put(ev)
        try:
            fn()
        except Exception:
            log.exception("protocol stage handler failed")

    def _peer_conn(self, dest: int):
        with self._lock:
            entry = self._outbound.get(dest)
        if entry is not None:
            return entry
        sock = socket.create_connection(_parse_addr(self.cluster.address_of(dest)), timeout=2.0)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        entry = (sock, threading.Lock())
        with self._lock:
            self._outbound[dest] = entry
        return entry

    # -- lifecycle -----------------------------------------------------------------

    def start(self) -> None:
        self.stages.start()
        self.node.start()
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(self.addr)
        listener.listen(64)
        self._listener = listener
        threading.Thread(target=self._accept_loop, daemon=True, name="dtx-accept").start()
        log.info("server %d serving on %s:%d", self.sid, *self.addr)

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(
                target=self._read_loop, args=(sock,), daemon=True, name="dtx-read"
            ).start()

    def _read_loop(self, sock: socket.socket) -> None:
        write_lock = threading.Lock()
        try:
            while True:
                env = recv_frame(sock)
                if env is None:
                    return
                if env.sender_kind == rpc.CLIENT:
                    with self._lock:
                        self._reply_conns[(env.sender_id, env.message_id)] = (sock, write_lock)
                        while len(self._reply_conns) > 4096:
                            self._reply_conns.popitem(last=False)
                self._submit(lambda e=env: self.node.on_message(e))
        except (OSError, FrameError) as exc:
            log.debug("connection dropped: %s", exc)
        finally:
            sock.close()

    def stop(self) -> None:
        self._stopping = True
        if self._listener is not None:
            self._listener.close()
        self.scheduler.stop()
        self.stages.shutdown(drain=True)
        self.node.shutdown()
        with self._lock:
            for sock, _ in self._outbound.values():
                sock.close()
            self._outbound.clear()

    def serve_forever(self) -> None:
        self.start()
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            self.stop()


class SocketDriver:
    """Blocking request/reply transport for one client (one thread)."""

    def __init__(self, cluster: ClusterConfig, timeout: float = 1.0, tries: int = 5) -> None:
        self.cluster = cluster
        self.timeout = timeout
        self.tries = tries
        self._conns: dict[int, socket.socket] = {}

    def _conn(self, sid: int) -> socket.socket:
        sock = self._conns.get(sid)
        if sock is not None:
            return sock
        sock = socket.create_connection(_parse_addr(self.cluster.address_of(sid)), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(self.timeout)
        self._conns[sid] = sock
        return sock

    def _drop(self, sid: int) -> None:
        sock = self._conns.pop(sid, None)
        if sock is not None:
            sock.close()

    def request(self, dest: int, env: Envelope) -> bytes | None:
        for _ in range(self.tries):
            try:
                sock = self._conn(dest)
                sock.sendall(rpc.frame_encode(env))
                while True:
                    resp = recv_frame(sock)
                    if resp is None:
                        raise OSError("connection closed")
                    if resp.message_id == env.message_id:
                        return resp.payload
                    # stale reply to an earlier timed-out request: skip it
            except (OSError, FrameError):
                self._drop(dest)
                time.sleep(0.05)
        return None

    @staticmethod
    def sleep(seconds: float) -> None:
        time.sleep(seconds)

    def handshake(self, seed: int | None = None) -> int:
        env = Envelope(MsgType.CLIENT_HELLO, rpc.CLIENT, 0, 0, None, b"")
        payload = self.request(self.cluster.member_ids[0], env)
        if payload is None:
            raise ConnectionError("no server answered the client handshake")
        return int.from_bytes(payload[:8], "little")

    def close(self) -> None:
        for sid in list(self._conns):
            self._drop(sid)


def connect_client(
    cluster: ClusterConfig,
    cache_capacity: int = 256,
    seed: int | None = None,
    timeout: float = 1.0,
) -> BlockingClient:
    import random

    driver = SocketDriver(cluster, timeout=timeout)
    client_id = driver.handshake()
    state = ClientState(
        client_id,
        list(cluster.member_ids),
        random.Random(seed),
        cache_capacity=cache_capacity,
    )
    return BlockingClient(driver, state)
