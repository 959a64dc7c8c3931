import random
import threading

import pytest
from hypothesis import given, strategies as st

from fabdb.errors import BufferStall, OutOfMemory, VersionChanged, VersionGarbageCollected, VersionNotFound
from fabdb.fabric import Fabric, RemoteAddr
from fabdb.memstore import (
    GarbageCollector,
    GcSnapshotList,
    LOCKED_BIT,
    MOVED_BIT,
    RecordLayout,
    RecordStore,
    ServerMemory,
    VersionHeader,
    VersionMover,
    header_decode,
    header_encode,
)
from fabdb.oracle import CommitTimestamp


# -- header codec --

def test_header_zero_and_lock_bit():
    assert header_encode(0, 0, 0, 0, 0) == 0
    assert header_encode(0, 0, 0, 0, locked=1) == 1


def test_header_documented_value():
    # thread 1, counter 1: 2^35 + 2^3
    assert header_encode(1, 1) == 34359738376
    assert header_decode(34359738376) == VersionHeader(1, 1, 0, 0, 0)


def test_header_width_overflow():
    with pytest.raises(ValueError):
        header_encode(1 << 29, 0)
    with pytest.raises(ValueError):
        header_encode(0, 1 << 32)


@given(
    st.integers(min_value=0, max_value=(1 << 29) - 1),
    st.integers(min_value=0, max_value=(1 << 32) - 1),
    st.booleans(), st.booleans(), st.booleans(),
)
def test_header_roundtrip(tid, counter, moved, deleted, locked):
    word = header_encode(tid, counter, moved, deleted, locked)
    assert word < 1 << 64
    assert header_decode(word) == VersionHeader(tid, counter, int(moved), int(deleted), int(locked))


# -- record harness --

@pytest.fixture
def rig():
    fabric = Fabric()
    server = fabric.add_server(0)
    memory = ServerMemory(server, heap_size=1 << 20, overflow_size=1 << 20)
    layout = RecordLayout(payload_len=16, buffer_slots=4)
    off = memory.allocate_extend(16 + layout.block_size * 8)
    shard = memory.add_shard(off, 16 + layout.block_size * 8, layout)
    store = RecordStore(fabric, stall_timeout=0.02)
    addr = memory.record_addr(shard, 0)
    server.local_write_word(memory.heap_region, off, 16 + layout.block_size)  # one record allocated
    return fabric, memory, store, layout, addr


def pat(counter: int) -> bytes:
    return bytes([counter % 251] * 16)


def install_chain(store, addr, layout, counters, thread_id=0):
    """Create the record then install successive versions, paper-style."""
    store.create_record(addr, layout, pat(counters[0]), CommitTimestamp(thread_id, counters[0]))
    for c in counters[1:]:
        cur, _ = store.read_current(addr, layout)
        store.install_version(addr, layout, cur, pat(c), CommitTimestamp(thread_id, c))


def test_read_current_single_verb(rig):
    fabric, memory, store, layout, addr = rig
    store.create_record(addr, layout, pat(1), CommitTimestamp(0, 1))
    conn = fabric.conn(0)
    before = conn.counts["read"]
    word, payload = store.read_current(addr, layout)
    assert conn.counts["read"] == before + 1
    assert header_decode(word).counter == 1
    assert payload == pat(1)


def test_install_moves_old_version_to_buffer(rig):
    """Validation+lock via one CAS, then the old current lands in the buffer
    slot and the new version (counter 6, unlocked) overwrites current."""
    fabric, memory, store, layout, addr = rig
    store.create_record(addr, layout, pat(3), CommitTimestamp(0, 3))
    cur, _ = store.read_current(addr, layout)
    store.install_version(addr, layout, cur, pat(6), CommitTimestamp(0, 6))
    word, payload = store.read_current(addr, layout)
    assert header_decode(word) == VersionHeader(0, 6, 0, 0, 0)
    assert payload == pat(6)
    next_write, hdrs = store.read_buffer_meta(addr, layout)
    assert next_write == 1
    assert header_decode(hdrs[0]).counter == 3


def test_install_cas_failure_changes_nothing(rig):
    fabric, memory, store, layout, addr = rig
    store.create_record(addr, layout, pat(1), CommitTimestamp(0, 1))
    stale = header_encode(0, 99)
    with pytest.raises(VersionChanged):
        store.install_version(addr, layout, stale, pat(2), CommitTimestamp(0, 2))
    word, payload = store.read_current(addr, layout)
    assert header_decode(word).counter == 1 and payload == pat(1)
    next_write, _ = store.read_buffer_meta(addr, layout)
    assert next_write == 0


def test_lock_then_unlock_restores(rig):
    fabric, memory, store, layout, addr = rig
    store.create_record(addr, layout, pat(5), CommitTimestamp(0, 5))
    cur, _ = store.read_current(addr, layout)
    locked = store.lock(addr, cur)
    assert locked == cur | LOCKED_BIT
    word, _ = store.read_current(addr, layout)
    assert word == locked
    store.unlock(addr, cur)
    word, _ = store.read_current(addr, layout)
    assert word == cur
    store.unlock(addr, cur)  # idempotent by value
    assert store.read_current(addr, layout)[0] == cur


def test_lock_exclusivity_stress(rig):
    fabric, memory, store, layout, addr = rig
    store.create_record(addr, layout, pat(1), CommitTimestamp(0, 1))
    cur, _ = store.read_current(addr, layout)
    wins = []
    gate = threading.Barrier(8)

    def contender(i):
        gate.wait()
        try:
            store.lock(addr, cur)
            wins.append(i)
        except VersionChanged:
            pass

    threads = [threading.Thread(target=contender, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(wins) == 1


def test_find_version_current_hit_is_one_verb(rig):
    fabric, memory, store, layout, addr = rig
    install_chain(store, addr, layout, [3])
    conn = fabric.conn(0)
    before = conn.counts["read"]
    _, found = store.find_version_with_current(addr, layout, (5,))
    assert found.header.counter == 3 and found.payload == pat(3)
    assert conn.counts["read"] == before + 1


def test_find_version_buffer_hit(rig):
    """Current (0,5) invisible under slot value 4; buffer holds 4..1; the
    newest visible is (0,4), found with at most three verbs."""
    fabric, memory, store, layout, addr = rig
    install_chain(store, addr, layout, [1, 2, 3, 4, 5])
    conn = fabric.conn(0)
    before = conn.counts["read"]
    found = store.find_version(addr, layout, (4,))
    assert found.header.counter == 4
    assert found.payload == pat(4)
    assert conn.counts["read"] - before <= 3  # current + meta + payload
    # brute force over every stored version: max visible counter per snapshot
    for snap in range(1, 6):
        assert store.find_version(addr, layout, (snap,)).header.counter == snap


def test_find_version_never_visible(rig):
    fabric, memory, store, layout, addr = rig
    install_chain(store, addr, layout, [2, 3])
    with pytest.raises(VersionNotFound):
        store.find_version(addr, layout, (1,))  # inserted after this snapshot


def test_find_version_tombstone_reports_absent(rig):
    fabric, memory, store, layout, addr = rig
    install_chain(store, addr, layout, [1])
    cur, _ = store.read_current(addr, layout)
    store.install_version(addr, layout, cur, pat(2), CommitTimestamp(0, 2), deleted=True)
    with pytest.raises(VersionNotFound):
        store.find_version(addr, layout, (2,))  # sees the delete
    assert store.find_version(addr, layout, (1,)).header.counter == 1  # older snapshot still reads


def test_buffer_stall_without_mover(rig):
    fabric, memory, store, layout, addr = rig
    install_chain(store, addr, layout, [1, 2, 3, 4, 5])  # buffer (K=4) now full, no mover
    cur, _ = store.read_current(addr, layout)
    with pytest.raises(BufferStall):
        store.install_version(addr, layout, cur, pat(6), CommitTimestamp(0, 6))
    # lock released on stall: the record is still updatable once space exists
    word, _ = store.read_current(addr, layout)
    assert word & LOCKED_BIT == 0


def test_mover_moves_and_slots_become_reusable(rig):
    fabric, memory, store, layout, addr = rig
    install_chain(store, addr, layout, [1, 2, 3, 4, 5])
    mover = VersionMover(memory)
    moved = mover.pass_once()
    assert moved == 4  # all four buffer slots copied out
    _, hdrs = store.read_buffer_meta(addr, layout)
    assert all(h & MOVED_BIT for h in hdrs if h)
    # moved slots may now be overwritten
    cur, _ = store.read_current(addr, layout)
    store.install_version(addr, layout, cur, pat(6), CommitTimestamp(0, 6))
    assert store.read_current(addr, layout)[1] == pat(6)


def test_mover_idles_on_empty_buffers(rig):
    fabric, memory, store, layout, addr = rig
    install_chain(store, addr, layout, [1])
    mover = VersionMover(memory)
    assert mover.pass_once() == 0
    alloc_before = memory.server.local_read_word(memory.overflow_region, 0)
    assert mover.pass_once() == 0
    assert memory.server.local_read_word(memory.overflow_region, 0) == alloc_before


def test_version_readable_after_move_and_after_reuse(rig):
    """Moved entries stay readable; once the slot is reused the version is
    served from overflow (long-reader path)."""
    fabric, memory, store, layout, addr = rig
    install_chain(store, addr, layout, [1, 2, 3, 4, 5])
    mover = VersionMover(memory)
    mover.pass_once()
    assert store.find_version(addr, layout, (2,)).payload == pat(2)  # from buffer, moved
    # k more installs overwrite every buffer slot
    for c in (6, 7, 8, 9):
        cur, _ = store.read_current(addr, layout)
        store.install_version(addr, layout, cur, pat(c), CommitTimestamp(0, c))
        mover.pass_once()
    found = store.find_version(addr, layout, (2,))
    assert found.payload == pat(2)  # now necessarily from overflow


def test_find_version_matches_brute_force(rig):
    """Randomized small-instance equivalence against a version list oracle."""
    fabric, memory, store, layout, addr = rig
    rng = random.Random(7)
    mover = VersionMover(memory)
    versions = []  # (counter, payload), install order; single writer thread 0
    counter = 0
    for step in range(60):
        counter += rng.randint(1, 3)
        payload = bytes(rng.randrange(256) for _ in range(16))
        if not versions:
            store.create_record(addr, layout, payload, CommitTimestamp(0, counter))
        else:
            cur, _ = store.read_current(addr, layout)
            store.install_version(addr, layout, cur, payload, CommitTimestamp(0, counter))
        versions.append((counter, payload))
        mover.pass_once()  # keep slots reusable; K=4 fills fast
        for _ in range(3):
            snap = rng.randint(0, counter + 2)
            expected = None
            for c, p in versions:  # brute force: newest installed visible
                if c <= snap:
                    expected = (c, p)
            if expected is None:
                with pytest.raises(VersionNotFound):
                    store.find_version(addr, layout, (snap,))
            else:
                found = store.find_version(addr, layout, (snap,))
                assert (found.header.counter, found.payload) == expected


def test_torn_pair_never_observed(rig):
    """Concurrent readers of the current version always see a header/payload
    pair from one version, never a mix."""
    fabric, memory, store, layout, addr = rig
    install_chain(store, addr, layout, [1])
    mover = VersionMover(memory)
    mover.start()
    stop = threading.Event()
    bad = []

    def reader():
        while not stop.is_set():
            word, payload = store.read_current(addr, layout)
            h = header_decode(word)
            if payload != pat(h.counter):
                bad.append((h, payload[:4]))
                return

    readers = [threading.Thread(target=reader) for _ in range(2)]
    for r in readers:
        r.start()
    try:
        for c in range(2, 400):
            while True:  # BufferStall aborts retry, as the protocol does
                cur, _ = store.read_current(addr, layout)
                try:
                    store.install_version(addr, layout, cur, pat(c), CommitTimestamp(0, c))
                    break
                except BufferStall:
                    continue
    finally:
        stop.set()
        for r in readers:
            r.join()
        mover.stop()
    assert not bad, f"torn pair: {bad[:1]}"


# -- extends --

def test_extend_allocate_free_reuse(rig):
    fabric, memory, store, layout, addr = rig
    a = memory.allocate_extend(4096)
    memory.free_extend(a, 4096)
    b = memory.allocate_extend(4096)
    assert b == a  # space reused


def test_extend_out_of_memory(rig):
    fabric, memory, store, layout, addr = rig
    with pytest.raises(OutOfMemory):
        memory.allocate_extend(1 << 30)


def test_concurrent_extends_disjoint():
    fabric = Fabric()
    memory = ServerMemory(fabric.add_server(0), heap_size=4 << 20)
    got = []
    lock = threading.Lock()

    def alloc():
        for _ in range(10):
            off = memory.allocate_extend(1024)
            with lock:
                got.append(off)

    threads = [threading.Thread(target=alloc) for _ in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got.sort()
    for (a, b) in zip(got, got[1:]):
        assert b >= a + 1024  # no overlap


# -- garbage collection --

def make_gc_rig(max_exec_time):
    fabric = Fabric()
    server = fabric.add_server(0)
    memory = ServerMemory(server, heap_size=1 << 20, overflow_size=1 << 20)
    layout = RecordLayout(payload_len=16, buffer_slots=4)
    off = memory.allocate_extend(16 + layout.block_size * 4)
    shard = memory.add_shard(off, 16 + layout.block_size * 4, layout)
    server.local_write_word(memory.heap_region, off, 16 + layout.block_size)
    store = RecordStore(fabric)
    snaps = GcSnapshotList(max_exec_time)
    gc = GarbageCollector(memory, snaps)
    return store, memory.record_addr(shard, 0), layout, memory, snaps, gc


def test_gc_never_deletes_visible_under_retention_snapshot():
    store, addr, layout, memory, snaps, gc = make_gc_rig(max_exec_time=0.0)
    mover = VersionMover(memory)
    install_chain(store, addr, layout, [1])
    for c in range(2, 9):  # K=4: mover keeps slots reusable
        cur, _ = store.read_current(addr, layout)
        store.install_version(addr, layout, cur, pat(c), CommitTimestamp(0, c))
        mover.pass_once()
    snaps.capture((4,), now=100.0)  # retention snapshot: slot value 4
    deleted = gc.pass_once()
    assert deleted > 0
    # (0,4) is the newest visible under the snapshot: must still be readable
    assert store.find_version(addr, layout, (4,)).header.counter == 4
    # strictly older superseded versions are gone
    with pytest.raises(VersionGarbageCollected):
        store.find_version(addr, layout, (2,))


def test_gc_off_long_reader_survives_many_installs():
    store, addr, layout, memory, snaps, gc = make_gc_rig(max_exec_time=3600.0)
    mover = VersionMover(memory)
    install_chain(store, addr, layout, [1])
    for c in range(2, 2 + 4 + 10):  # K + 10 newer installs
        cur, _ = store.read_current(addr, layout)
        store.install_version(addr, layout, cur, pat(c), CommitTimestamp(0, c))
        mover.pass_once()
    assert gc.pass_once() == 0  # nothing eligible: E is huge
    assert store.find_version(addr, layout, (1,)).payload == pat(1)


def test_gc_snapshot_selection_respects_max_exec_time():
    snaps = GcSnapshotList(max_exec_time=10.0)
    snaps.capture((1,), now=0.0)
    snaps.capture((5,), now=50.0)
    snaps.capture((9,), now=95.0)
    assert snaps.retention_snapshot(now=100.0) == (5,)  # newest older than E
    assert snaps.retention_snapshot(now=104.0) == (5,)
    assert snaps.retention_snapshot(now=106.0) == (9,)
