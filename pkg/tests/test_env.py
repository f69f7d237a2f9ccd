"""Durable environments: persist barriers, crash semantics, blobs."""

import os

import pytest

from dtx.env import DiskEnv, MemEnv, RegionFullError


def test_memory_region_crash_zeroes_unpersisted():
    env = MemEnv()
    r = env.create_region("r.log", 64)
    r.write_at(0, b"keep")
    r.persist(0, 4)
    r.write_at(8, b"lose")
    r.crash()
    assert r.read_at(0, 4) == b"keep"
    assert r.read_at(8, 4) == b"\0\0\0\0"


def test_region_bounds_checked():
    r = MemEnv().create_region("r.log", 16)
    with pytest.raises(RegionFullError):
        r.write_at(10, b"toolongdata")
    with pytest.raises(ValueError):
        r.read_at(10, 10)


def test_partial_persist_keeps_other_ranges_dirty():
    r = MemEnv().create_region("r.log", 64)
    r.write_at(0, b"aaaa")
    r.write_at(32, b"bbbb")
    r.persist(0, 4)  # only the first write is durable
    r.crash()
    assert r.read_at(0, 4) == b"aaaa"
    assert r.read_at(32, 4) == b"\0\0\0\0"


def test_memenv_region_registry():
    env = MemEnv()
    env.create_region("b.log", 8)
    env.create_region("a.log", 8)
    env.create_region("gclog", 8)
    assert env.list_regions(".log") == ["a.log", "b.log"]
    assert env.region_exists("gclog")
    with pytest.raises(FileExistsError):
        env.create_region("a.log", 8)
    env.delete_region("a.log")
    assert not env.region_exists("a.log")


def test_memenv_blobs_and_ts():
    env = MemEnv()
    assert env.get_blob("epoch") is None
    env.put_blob("epoch", b"1")
    assert env.get_blob("epoch") == b"1"
    assert env.next_ts() < env.next_ts()


@pytest.mark.parametrize("backend", ["mapped", "file"])
def test_diskenv_round_trip(tmp_path, backend):
    env = DiskEnv(str(tmp_path), backend=backend)
    r = env.create_region("00000000000000000001.log", 4096)
    r.write_at(0, b"payload")
    r.persist(0, 7)
    r.close()
    # reopen from the directory
    env2 = DiskEnv(str(tmp_path), backend=backend)
    assert env2.list_regions(".log") == ["00000000000000000001.log"]
    r2 = env2.open_region("00000000000000000001.log")
    assert r2.read_at(0, 7) == b"payload"
    r2.close()
    env2.delete_region("00000000000000000001.log")
    assert env2.list_regions(".log") == []


def test_diskenv_rejects_unknown_backend(tmp_path):
    with pytest.raises(ValueError):
        DiskEnv(str(tmp_path), backend="nvme")


def test_diskenv_blob_is_atomic_replace(tmp_path):
    env = DiskEnv(str(tmp_path))
    env.put_blob("epoch", b"1")
    env.put_blob("epoch", b"2")
    assert env.get_blob("epoch") == b"2"
    assert not os.path.exists(os.path.join(str(tmp_path), "epoch.tmp"))


def test_diskenv_wal_files_live_under_wal_dir(tmp_path):
    env = DiskEnv(str(tmp_path))
    r = env.create_region("00000000000000000009.log", 4096)
    r.close()
    assert os.path.exists(os.path.join(str(tmp_path), "wal", "00000000000000000009.log"))


def test_diskenv_ts_monotone(tmp_path):
    env = DiskEnv(str(tmp_path))
    ts = [env.next_ts() for _ in range(100)]
    assert ts == sorted(ts) and len(set(ts)) == 100
