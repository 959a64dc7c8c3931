import pytest

from fabdb.checker import (
    EventLog,
    HistoryEvent,
    check_gsi,
    check_monotonic_vectors,
    dump_events,
    load_events,
)
from fabdb.errors import IncompleteHistory


def ev(seq, thread, txn, kind, record=None, version=None, vector=None, deleted=0):
    return HistoryEvent(seq, thread, txn, kind, record, version, vector, deleted)


def serial_history():
    """T1 installs r=(0,1), publishes; T2 reads (0,1) under vector (1,0),
    installs (1,1), publishes. Fully serial: no violations."""
    return [
        ev(1, 0, 1, "begin", vector=(0, 0)),
        ev(2, 0, 1, "install", record="t:1", version=(0, 1)),
        ev(3, 0, 1, "publish", version=(0, 1)),
        ev(4, 1, 1, "begin", vector=(1, 0)),
        ev(5, 1, 1, "read", record="t:1", version=(0, 1)),
        ev(6, 1, 1, "install", record="t:1", version=(1, 1)),
        ev(7, 1, 1, "publish", version=(1, 1)),
    ]


def test_serial_history_accepted():
    assert check_gsi(serial_history()) == []


def test_stale_read_detected():
    """T2's snapshot (1,0) covers version (0,1) of record r, but T2 read the
    older absent state: R1 violation."""
    history = [
        ev(1, 0, 1, "begin", vector=(0, 0)),
        ev(2, 0, 1, "install", record="t:1", version=(0, 1)),
        ev(3, 0, 1, "publish", version=(0, 1)),
        ev(4, 1, 1, "begin", vector=(1, 0)),
        ev(5, 1, 1, "read", record="t:1", version=None),  # should see (0,1)
        ev(6, 1, 1, "publish", version=(1, 1)),
    ]
    out = check_gsi(history)
    assert len(out) == 1 and out[0].rule == "R1"


def test_read_of_version_older_than_newest_visible_detected():
    history = [
        ev(1, 0, 1, "begin", vector=(0,)),
        ev(2, 0, 1, "install", record="t:1", version=(0, 1)),
        ev(3, 0, 1, "publish", version=(0, 1)),
        ev(4, 0, 2, "begin", vector=(1,)),
        ev(5, 0, 2, "install", record="t:1", version=(0, 2)),
        ev(6, 0, 2, "publish", version=(0, 2)),
        # snapshot (2,) sees v2 as newest, but the read returned v1
        ev(7, 0, 3, "begin", vector=(2,)),
        ev(8, 0, 3, "read", record="t:1", version=(0, 1)),
        ev(9, 0, 3, "publish", version=(0, 3)),
    ]
    out = check_gsi(history)
    assert len(out) == 1 and out[0].rule == "R1"


def test_overlapping_writers_detected():
    """Two committers with overlapping [begin, publish] windows wrote the
    same record: first-committer-wins was violated."""
    history = [
        ev(1, 0, 1, "begin", vector=(0, 0)),
        ev(2, 1, 1, "begin", vector=(0, 0)),
        ev(3, 0, 1, "install", record="t:1", version=(0, 1)),
        ev(4, 1, 1, "install", record="t:1", version=(1, 1)),
        ev(5, 0, 1, "publish", version=(0, 1)),
        ev(6, 1, 1, "publish", version=(1, 1)),
    ]
    out = check_gsi(history)
    assert any(v.rule == "R2" for v in out)


def test_aborted_transactions_are_ignored():
    history = [
        ev(1, 0, 1, "begin", vector=(0, 0)),
        ev(2, 1, 1, "begin", vector=(0, 0)),
        ev(3, 0, 1, "install", record="t:1", version=(0, 1)),
        ev(4, 0, 1, "publish", version=(0, 1)),
        ev(5, 1, 1, "abort"),
        ev(6, 1, 1, "publish", version=(1, 1)),  # aborts publish their counter too
    ]
    assert check_gsi(history) == []


def test_tombstone_makes_record_absent():
    history = [
        ev(1, 0, 1, "begin", vector=(0,)),
        ev(2, 0, 1, "install", record="t:1", version=(0, 1)),
        ev(3, 0, 1, "publish", version=(0, 1)),
        ev(4, 0, 2, "begin", vector=(1,)),
        ev(5, 0, 2, "read", record="t:1", version=(0, 1)),
        ev(6, 0, 2, "install", record="t:1", version=(0, 2), deleted=1),
        ev(7, 0, 2, "publish", version=(0, 2)),
        ev(8, 0, 3, "begin", vector=(2,)),
        ev(9, 0, 3, "read", record="t:1", version=None),  # correctly absent
        ev(10, 0, 3, "publish", version=(0, 3)),
    ]
    assert check_gsi(history) == []
    wrong = [e._replace(version=(0, 1)) if e.seq == 9 else e for e in history]
    assert any(v.rule == "R1" for v in check_gsi(wrong))


def test_naive_mode_single_slot_vectors():
    """Scalar timestamps embed as single-slot vectors, same code path."""
    history = [
        ev(1, 0, 1, "begin", vector=(0,)),
        ev(2, 0, 1, "install", record="t:1", version=(0, 1)),
        ev(3, 0, 1, "publish", version=(0, 1)),
        ev(4, 1, 2, "begin", vector=(1,)),
        ev(5, 1, 2, "read", record="t:1", version=(0, 1)),
        ev(6, 1, 2, "publish", version=(0, 2)),
    ]
    assert check_gsi(history) == []


def test_verdict_independent_of_interleaving():
    """Reordering events of independent transactions (keeping per-thread and
    per-record orders) does not change the verdict."""
    base = serial_history()
    # interleave an independent transaction on another record
    extra = [
        ev(10, 2, 1, "begin", vector=(0, 0)),
        ev(11, 2, 1, "install", record="u:9", version=(2, 1)),
        ev(12, 2, 1, "publish", version=(2, 1)),
    ]
    a = base + extra
    b = base[:2] + extra + base[2:]
    b = [e._replace(seq=i + 1) for i, e in enumerate(b)]
    assert check_gsi(a) == [] and check_gsi(b) == []


def test_monotonic_vectors():
    ok = [
        ev(1, 0, 1, "begin", vector=(1, 2)),
        ev(2, 0, 2, "begin", vector=(1, 3)),
        ev(3, 0, 3, "begin", vector=(2, 3)),
    ]
    assert check_monotonic_vectors(ok) == []
    bad = [
        ev(1, 0, 1, "begin", vector=(1, 2)),
        ev(2, 0, 2, "begin", vector=(2, 1)),
    ]
    out = check_monotonic_vectors(bad)
    assert len(out) == 1 and out[0].rule == "monotonic"
    # two different threads may disagree without violating the per-thread rule
    cross = [
        ev(1, 0, 1, "begin", vector=(1, 2)),
        ev(2, 1, 1, "begin", vector=(2, 1)),
    ]
    assert check_monotonic_vectors(cross) == []


def test_event_log_capacity_and_incomplete_history():
    log = EventLog(capacity=2)
    log.emit(0, 1, "begin", vector=(0,))
    log.emit(0, 1, "publish", version=(0, 1))
    log.emit(0, 1, "extra")
    with pytest.raises(IncompleteHistory):
        log.snapshot()


def test_event_file_roundtrip(tmp_path):
    events = serial_history()
    path = str(tmp_path / "events.log")
    dump_events(events, path)
    loaded = load_events(path)
    assert loaded == events
