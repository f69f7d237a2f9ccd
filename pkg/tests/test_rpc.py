"""Wire framing, payload codecs, and at-most-once bookkeeping."""

import pytest
from hypothesis import given, strategies as st

from dtx import rpc
from dtx.model import SubTranx, Transaction, TranxID
from dtx.rpc import (
    AbortReason,
    ClientWindow,
    DedupTable,
    Envelope,
    FrameError,
    MsgType,
)

keys = st.binary(min_size=1, max_size=32)
values = st.binary(max_size=128)
tranx_ids = st.builds(TranxID, st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1))
envelopes = st.builds(
    Envelope,
    st.sampled_from(list(MsgType)),
    st.sampled_from([rpc.CLIENT, rpc.SERVER]),
    st.integers(0, 2**64 - 1),
    st.integers(0, 2**64 - 1),
    st.one_of(st.none(), tranx_ids),
    st.binary(max_size=256),
)


@given(envelopes)
def test_frame_round_trip(env):
    assert rpc.frame_decode(rpc.frame_encode(env)) == env


def test_frame_rejects_bad_version_and_length():
    env = Envelope(MsgType.READ, rpc.CLIENT, 1, 2, None, b"x")
    data = bytearray(rpc.frame_encode(env))
    data[4] = 9
    with pytest.raises(FrameError):
        rpc.frame_decode(bytes(data))
    with pytest.raises(FrameError):
        rpc.frame_decode(rpc.frame_encode(env)[:-1])


@given(keys)
def test_read_codec(k):
    assert rpc.dec_read_req(rpc.enc_read_req(k)) == k


@given(st.one_of(st.none(), st.tuples(values, st.integers(0, 2**64 - 1))))
def test_read_resp_codec(entry):
    assert rpc.dec_read_resp(rpc.enc_read_resp(entry)) == entry


@given(
    st.booleans(),
    st.one_of(st.none(), st.sampled_from(list(AbortReason))),
    st.lists(st.tuples(keys, values, st.integers(0, 2**64 - 1)), max_size=4),
)
def test_commit_resp_codec(committed, reason, piggyback):
    got = rpc.dec_commit_resp(rpc.enc_commit_resp(committed, reason, piggyback))
    assert got == (committed, reason, piggyback)


def test_commit_req_codec():
    txn = Transaction(((b"a", 3),), ((b"b", b"val"),))
    assert rpc.dec_commit_req(rpc.enc_commit_req(txn)) == txn


def test_prepare_and_vote_codecs():
    sub = SubTranx(((b"k", 7),), ((b"k", b"v"),))
    assert rpc.dec_prepare(rpc.enc_prepare(sub)) == sub
    reason, piggy = rpc.dec_vote_abort(
        rpc.enc_vote_abort(AbortReason.STALE_READ, [(b"k", b"v", 8)])
    )
    assert reason is AbortReason.STALE_READ
    assert piggy == [(b"k", b"v", 8)]


@given(st.lists(tranx_ids, max_size=8))
def test_tranx_list_codec(ts):
    assert rpc.dec_tranx_list(rpc.enc_tranx_list(ts)) == ts


@given(st.integers(0, 2**64 - 1))
def test_gc_lc_codec(lc):
    assert rpc.dec_gc_lc(rpc.enc_gc_lc(lc)) == lc


def test_status_codec():
    for s in ("Commit", "Abort", "Pending"):
        assert rpc.dec_status_resp(rpc.enc_status_resp(s)) == s


# -- dedup ---------------------------------------------------------------


def test_client_window_caches_and_slides():
    w = ClientWindow(capacity=3)
    for mid in (1, 2, 3):
        w.record(mid, f"r{mid}".encode())
    assert w.check(1) == b"r1"
    w.record(4, b"r4")  # evicts 1
    assert w.check(1) is None
    assert w.check(4) == b"r4"


def test_dedup_client_counts_duplicates():
    d = DedupTable()
    assert d.check_client(7, 1) is None
    d.record_client(7, 1, b"resp")
    assert d.check_client(7, 1) == b"resp"
    assert d.duplicates_blocked == 1
    d.retire_client(7)
    assert d.check_client(7, 1) is None


def test_dedup_tranx_prune_by_watermark():
    d = DedupTable()
    old, new = TranxID(0, 5), TranxID(0, 9)
    d.record_tranx(old, MsgType.COMMIT_DECISION)
    d.record_tranx(new, MsgType.COMMIT_DECISION)
    d.prune({0: 5})
    assert not d.seen_tranx(old, MsgType.COMMIT_DECISION)
    assert d.seen_tranx(new, MsgType.COMMIT_DECISION)


def test_dedup_keyed_by_message_type():
    d = DedupTable()
    t = TranxID(1, 1)
    d.record_tranx(t, MsgType.PREPARE, b"vote")
    assert d.check_tranx(t, MsgType.PREPARE) == b"vote"
    assert d.check_tranx(t, MsgType.COMMIT_DECISION) is None
