"""Per-server versioned key-value storage with a write-through read cache.

Values are stored together with their version as a fixed 8-byte
little-endian suffix (binary-safe, unlike a text delimiter).  The durable
map sits behind a narrow interface (get/apply/sync/items) with two
backends: an in-process one for the deterministic simulator, where crash
durability is modelled by a volatile overlay that a restart discards, and
an append-log file store for real data directories.
"""

from __future__ import annotations

import os
import struct
import zlib
from collections import OrderedDict

from .model import MalformedRecordError

VERSION_SUFFIX = 8


def encode_value(value: bytes, version: int) -> bytes:
    return value + struct.pack("<Q", version)


def decode_value(data: bytes) -> tuple[bytes, int]:
    if len(data) < VERSION_SUFFIX:
        raise MalformedRecordError(f"versioned value of {len(data)} bytes is too short")
    (version,) = struct.unpack("<Q", data[-VERSION_SUFFIX:])
    return data[:-VERSION_SUFFIX], version


class KvStore:
    """Durable ordered key -> (value, version) map."""

    def get(self, key: bytes) -> tuple[bytes, int] | None:
        raise NotImplementedError

    def apply(self, writes: list[tuple[bytes, bytes, int]]) -> None:
        raise NotImplementedError

    def sync(self) -> None:
        raise NotImplementedError

    def items(self):
        raise NotImplementedError

    def close(self) -> None:
        pass


class MemKvStore(KvStore):
    """Simulator store: `durable` survives a crash, the overlay does not.

    The durable dict is owned by the caller (the simulated server's
    environment) so a restarted server reopens the same one.
    """

    def __init__(self, durable: dict[bytes, tuple[bytes, int]]) -> None:
        self.durable = durable
        self._overlay: dict[bytes, tuple[bytes, int]] = {}

    def get(self, key: bytes) -> tuple[bytes, int] | None:
        if key in self._overlay:
            return self._overlay[key]
        return self.durable.get(key)

    def apply(self, writes: list[tuple[bytes, bytes, int]]) -> None:
        for key, value, version in writes:
            self._overlay[key] = (value, version)

    def sync(self) -> None:
        self.durable.update(self._overlay)
        self._overlay.clear()

    def items(self):
        merged = dict(self.durable)
        merged.update(self._overlay)
        return sorted(merged.items())


class FileKvStore(KvStore):
    """Append-log backed store: <dir>/db/data.log holds framed writes.

    Open replays the log (tolerating a torn tail); sync is flush+fsync.
    """

    def __init__(self, root: str) -> None:
        self.path = os.path.join(root, "db", "data.log")
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        self._map: dict[bytes, tuple[bytes, int]] = {}
        self._replay()
        self._f = open(self.path, "ab")

    def _replay(self) -> None:
        if not os.path.exists(self.path):
            return
        with open(self.path, "rb") as f:
            data = f.read()
        pos = 0
        while pos + 8 <= len(data):
            n, crc = struct.unpack_from("<II", data, pos)
            if pos + 8 + n > len(data):
                break  # torn tail
            frame = data[pos + 8 : pos + 8 + n]
            if zlib.crc32(frame) & 0xFFFFFFFF != crc:
                break
            klen, vlen = struct.unpack_from("<II", frame, 0)
            key = frame[8 : 8 + klen]
            value = frame[8 + klen : 8 + klen + vlen]
            (version,) = struct.unpack_from("<Q", frame, 8 + klen + vlen)
            self._map[key] = (value, version)
            pos += 8 + n

    def get(self, key: bytes) -> tuple[bytes, int] | None:
        return self._map.get(key)

    def apply(self, writes: list[tuple[bytes, bytes, int]]) -> None:
        for key, value, version in writes:
            frame = struct.pack("<II", len(key), len(value)) + key + value + struct.pack(
                "<Q", version
            )
            self._f.write(struct.pack("<II", len(frame), zlib.crc32(frame) & 0xFFFFFFFF))
            self._f.write(frame)
            self._map[key] = (value, version)

    def sync(self) -> None:
        self._f.flush()
        os.fsync(self._f.fileno())

    def items(self):
        return sorted(self._map.items())

    def close(self) -> None:
        self._f.flush()
        self._f.close()


class ServerCache:
    """Bounded LRU of key -> (value, version); never replaces with a stale version."""

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self._map: OrderedDict[bytes, tuple[bytes, int]] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, key: bytes) -> tuple[bytes, int] | None:
        entry = self._map.get(key)
        if entry is not None:
            self._map.move_to_end(key)
            self.hits += 1
        else:
            self.misses += 1
        return entry

    def put(self, key: bytes, value: bytes, version: int) -> bool:
        if self.capacity <= 0:
            return False
        old = self._map.get(key)
        if old is not None and old[1] > version:
            return False  # stale put
        self._map[key] = (value, version)
        self._map.move_to_end(key)
        while len(self._map) > self.capacity:
            self._map.popitem(last=False)
        return True

    def invalidate(self, keys) -> None:
        for key in keys:
            self._map.pop(key, None)

    def __len__(self) -> int:
        return len(self._map)


class StorageEngine:
    """get/apply facade with write-through cache coherence."""

    def __init__(self, store: KvStore, cache_capacity: int = 0) -> None:
        self.store = store
        self.cache = ServerCache(cache_capacity)

    def get(self, key: bytes) -> tuple[bytes, int] | None:
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        entry = self.store.get(key)
        if entry is not None:
            self.cache.put(key, entry[0], entry[1])
        return entry

    def current_version(self, key: bytes) -> int:
        entry = self.store.get(key)
        return entry[1] if entry is not None else 0

    def apply_writes(
        self, writes: list[tuple[bytes, bytes, int]], replay: bool = False
    ) -> None:
        """Apply (key, value, post_version) writes, write-through to the cache.

        On the live commit path the post-version must be exactly current+1
        (1 for an insert); during WAL replay already-applied writes are
        no-ops so replay is idempotent.
        """
        effective = []
        for key, value, version in writes:
            current = self.current_version(key)
            if replay:
                if version <= current:
                    continue
            else:
                assert version == current + 1, (
                    f"post-version {version} for key {key!r} is not current {current}+1"
                )
            effective.append((key, value, version))
        if effective:
            self.store.apply(effective)
            for key, value, version in effective:
                if key in self.cache._map:
                    self.cache.put(key, value, version)

    def sync(self) -> None:
        self.store.sync()
