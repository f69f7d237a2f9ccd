"""Client library: read lookup order, retry policy, backoff, cache updates."""

import random

import pytest

from dtx import rpc
from dtx.client import (
    BACKOFF_BASE,
    BACKOFF_CAP,
    BACKOFF_JITTER,
    ClientState,
    ReadUnavailableError,
    TxnHandle,
    coordinator_for,
    txn_commit,
    txn_read,
    txn_write,
)
from dtx.rpc import AbortReason
from dtx.server import owner_of

MEMBERS = [0, 1, 2]


def make_state(**kw):
    return ClientState(client_id=7, members=MEMBERS, rng=random.Random(0), **kw)


def drive(gen, responder):
    """Run a client generator, answering effects via responder(effect)."""
    effects = []
    try:
        effect = next(gen)
        while True:
            effects.append(effect)
            effect = gen.send(responder(effect))
    except StopIteration as stop:
        return stop.value, effects


def read_resp(entry):
    return rpc.enc_read_resp(entry)


def commit_resp(ok, reason=None, piggyback=()):
    return rpc.enc_commit_resp(ok, reason, list(piggyback))


# -- coordinator choice -----------------------------------------------------------


def test_coordinator_is_plurality_owner_lowest_on_tie():
    keys = [b"k%d" % i for i in range(50)]
    by_owner = {}
    for k in keys:
        by_owner.setdefault(owner_of(k, MEMBERS), []).append(k)
    # two keys from server 2's shard, one from server 0's: plurality wins
    ks = by_owner[2][:2] + by_owner[0][:1]
    assert coordinator_for(ks, MEMBERS) == 2
    # one key each from server 2 and server 0: tie -> lowest id
    assert coordinator_for([by_owner[2][0], by_owner[0][0]], MEMBERS) == 0
    with pytest.raises(ValueError):
        coordinator_for([], MEMBERS)


# -- reads ------------------------------------------------------------------------


def test_read_lookup_order_writes_reads_cache_remote():
    cs = make_state()
    h = TxnHandle()
    # 1) own write wins without any rpc
    txn_write(h, b"k", b"mine")
    val, fx = drive(txn_read(cs, h, b"k"), lambda e: None)
    assert val == b"mine" and fx == []
    # 2) recorded read wins
    h2 = TxnHandle(reads={b"j": (b"seen", 4)})
    val, fx = drive(txn_read(cs, h2, b"j"), lambda e: None)
    assert val == b"seen" and fx == []
    # 3) cache wins and is copied into the handle's read set
    cs.cache.put(b"c", b"hot", 2)
    h3 = TxnHandle()
    val, fx = drive(txn_read(cs, h3, b"c"), lambda e: None)
    assert val == b"hot" and fx == [] and h3.reads[b"c"] == (b"hot", 2)
    assert cs.stats["cache_hits"] == 1
    # 4) remote read goes to the key's owner and populates handle + cache
    h4 = TxnHandle()
    val, fx = drive(txn_read(cs, h4, b"r"), lambda e: read_resp((b"cold", 9)))
    assert val == b"cold"
    assert fx[0][0] == "rpc" and fx[0][1] == owner_of(b"r", MEMBERS)
    assert h4.reads[b"r"] == (b"cold", 9) and cs.cache.get(b"r") == (b"cold", 9)


def test_missing_key_reads_as_version_zero():
    cs = make_state()
    h = TxnHandle()
    val, _ = drive(txn_read(cs, h, b"nope"), lambda e: read_resp(None))
    assert val is None and h.reads[b"nope"] == (None, 0)


def test_read_rpc_exhaustion_raises():
    cs = make_state()
    gen = txn_read(cs, TxnHandle(), b"k")
    with pytest.raises(ReadUnavailableError):
        drive(gen, lambda e: None)


# -- commit retry policy ------------------------------------------------------------


def setup_handle():
    h = TxnHandle(reads={b"k": (b"old", 3)})
    txn_write(h, b"k", b"new")
    return h


def test_commit_success_updates_cache_at_read_version_plus_one():
    cs = make_state()
    h = setup_handle()
    txn_write(h, b"blind", b"b")  # written but never read
    cs.cache.put(b"blind", b"stale", 1)
    (ok, reason), fx = drive(txn_commit(cs, h), lambda e: commit_resp(True))
    assert ok and reason is None and h.status == "Done" and h.attempts == 1
    assert cs.cache.get(b"k") == (b"new", 4)  # read at 3, landed at 4
    assert cs.cache.get(b"blind") is None  # unknown post-version: invalidated
    assert cs.stats["commits"] == 1


def test_stale_read_rebuilds_from_piggyback_and_remote():
    cs = make_state()
    h = TxnHandle(reads={b"k": (b"old", 3), b"j": (b"o2", 1)})
    txn_write(h, b"k", b"new")
    script = iter(
        [
            commit_resp(False, AbortReason.STALE_READ, [(b"k", b"cur", 5)]),
            read_resp((b"j2", 2)),  # j was not piggybacked: refetched
            commit_resp(True),
        ]
    )
    (ok, _), fx = drive(txn_commit(cs, h), lambda e: next(script))
    assert ok and h.attempts == 2
    assert h.reads == {b"k": (b"cur", 5), b"j": (b"j2", 2)}
    assert all(e[0] == "rpc" for e in fx)  # no sleeps on the read-denied path


def test_write_denied_backs_off_exponentially_with_cap_and_jitter():
    cs = make_state(max_retries=12)
    h = setup_handle()

    def responder(e):
        return commit_resp(False, AbortReason.LOCK_DENIED_WRITE) if e[0] == "rpc" else None

    (ok, reason), fx = drive(txn_commit(cs, h), responder)
    assert not ok and reason == AbortReason.LOCK_DENIED_WRITE
    sleeps = [e[1] for e in fx if e[0] == "sleep"]
    assert len(sleeps) == cs.max_retries - 1  # no sleep after the final attempt
    for step, d in enumerate(sleeps):
        nominal = min(BACKOFF_BASE * 2.0**step, BACKOFF_CAP)
        assert nominal * (1 - BACKOFF_JITTER) <= d <= nominal * (1 + BACKOFF_JITTER)
    assert max(sleeps) <= BACKOFF_CAP * (1 + BACKOFF_JITTER)


def test_silence_is_terminal_unknown():
    cs = make_state()
    h = setup_handle()
    (ok, reason), fx = drive(txn_commit(cs, h), lambda e: None)
    assert not ok and reason == AbortReason.UNKNOWN
    assert len(fx) == 1 and h.status == "Done"


def test_log_failure_is_terminal():
    cs = make_state()
    h = setup_handle()
    (ok, reason), fx = drive(
        txn_commit(cs, h), lambda e: commit_resp(False, AbortReason.LOG_FAILURE)
    )
    assert not ok and reason == AbortReason.LOG_FAILURE and len(fx) == 1


def test_failed_commit_invalidates_cached_txn_keys():
    cs = make_state()
    cs.cache.put(b"k", b"old", 3)
    h = setup_handle()
    drive(txn_commit(cs, h), lambda e: commit_resp(False, AbortReason.LOG_FAILURE))
    assert cs.cache.get(b"k") is None


def test_retry_reuses_fresh_message_ids_and_targets_coordinator():
    cs = make_state()
    h = setup_handle()
    seen = []

    def responder(e):
        if e[0] != "rpc":
            return None
        seen.append((e[1], e[2].message_id))
        return commit_resp(False, AbortReason.LOCK_DENIED_WRITE)

    cs.max_retries = 3
    drive(txn_commit(cs, h), responder)
    coordinator = coordinator_for([b"k"], MEMBERS)
    assert [s for s, _ in seen] == [coordinator] * 3
    mids = [m for _, m in seen]
    assert len(set(mids)) == 3 and h.last_mid == mids[-1]
