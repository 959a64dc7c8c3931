import struct
import threading

import pytest

from conftest import small_cluster
from fabdb.checker import check_gsi
from fabdb.errors import KeyNotFound, UnknownObject, VersionNotFound
from fabdb.fabric import RemoteAddr
from fabdb.index import HashTable
from fabdb.memstore import LOCKED_BIT, header_decode
from fabdb.txn import FIRST_USER_STMT, _table_meta

VAL = struct.Struct("<Q8x")

K_UPDATE = FIRST_USER_STMT
K_INSERT = FIRST_USER_STMT + 1
K_READ = FIRST_USER_STMT + 2
K_RMW = FIRST_USER_STMT + 3


def kv_update(ops, params):
    key, value = params
    ops.read("kv", key)
    ops.update("kv", key, VAL.pack(value))


def kv_insert(ops, params):
    key, value = params
    ops.insert("kv", key, VAL.pack(value))


def kv_read(ops, params):
    (key,) = params
    ops.read("kv", key)


def kv_rmw(ops, params):
    (key,) = params
    raw = ops.read("kv", key)
    (v,) = struct.unpack_from("<Q", raw)
    ops.update("kv", key, VAL.pack(v + 1))


def kv_cluster(**overrides):
    c = small_cluster(**overrides)
    c.register_statement(K_UPDATE, kv_update)
    c.register_statement(K_INSERT, kv_insert)
    c.register_statement(K_READ, kv_read)
    c.register_statement(K_RMW, kv_rmw)
    meta = c.create_table("kv", VAL.size, 512, buffer_slots=8)
    c.begin_load()
    for key in range(1, 33):
        c.bulk_put(meta, key, VAL.pack(0))
    c.finish_load()
    return c, meta


def read_value(cluster, meta, key, snapshot=None):
    ht = HashTable(cluster.fabric, meta)
    snap = snapshot if snapshot is not None else cluster.current_vector()
    found = cluster._store.find_version(ht.get(key), meta.layout, snap)
    return VAL.unpack(found.payload)[0], found.header


def test_single_writer_sequential_commits():
    cluster, meta = kv_cluster()
    with cluster:
        thread = cluster.threads[0]
        for i in range(1, 101):
            outcome = thread.execute(K_UPDATE, [5, i])
            assert outcome.committed and outcome.attempts == 1
            assert outcome.cts == (thread.slot, i)
        value, header = read_value(cluster, meta, 5)
        assert value == 100
        assert header.counter == 100
    assert check_gsi(cluster.events.snapshot()) == []


def test_write_write_conflict_exactly_one_commits():
    cluster, meta = kv_cluster(threads_per_server=2)
    with cluster:
        t1, t2 = cluster.threads
        gate = threading.Barrier(2)
        results = {}

        def contend(thread, tag):
            gate.wait()
            results[tag] = thread.execute(K_RMW, [7], retry_cap=0)

        a = threading.Thread(target=contend, args=(t1, "a"))
        b = threading.Thread(target=contend, args=(t2, "b"))
        a.start(); b.start(); a.join(); b.join()
    outcomes = sorted(results.values(), key=lambda o: o.committed)
    # under a shared snapshot exactly one wins; with luck of scheduling both
    # may serialize cleanly, but never both-fail
    committed = [o for o in results.values() if o.committed]
    assert len(committed) >= 1
    failed = [o for o in results.values() if not o.committed]
    for o in failed:
        assert o.reason == "conflict"
    assert check_gsi(cluster.events.snapshot()) == []


def test_forced_conflict_with_scripted_interleaving():
    """Both transactions read under the same snapshot, then commit in turn:
    first-committer-wins, the loser aborts with Conflict."""
    cluster, meta = kv_cluster(threads_per_server=2)
    ready = threading.Barrier(2)
    release = threading.Event()

    def scripted(ops, params):
        (key,) = params
        raw = ops.read("kv", key)
        (v,) = struct.unpack_from("<Q", raw)
        ready.wait()
        release.wait()
        ops.update("kv", key, VAL.pack(v + 1))

    cluster.register_statement(FIRST_USER_STMT + 9, scripted)
    with cluster:
        t1, t2 = cluster.threads
        results = {}

        def run(thread, tag):
            results[tag] = thread.execute(FIRST_USER_STMT + 9, [9], retry_cap=0)

        a = threading.Thread(target=run, args=(t1, "a"))
        b = threading.Thread(target=run, args=(t2, "b"))
        a.start(); b.start()
        release.set()
        a.join(); b.join()
    committed = [o for o in results.values() if o.committed]
    aborted = [o for o in results.values() if not o.committed]
    assert len(committed) == 1 and len(aborted) == 1
    assert aborted[0].reason == "conflict"
    value, _ = read_value(cluster, meta, 9)
    assert value == 1  # exactly one increment took effect
    assert check_gsi(cluster.events.snapshot()) == []


def test_read_only_transactions_always_commit():
    cluster, meta = kv_cluster(threads_per_server=2)
    with cluster:
        t1, t2 = cluster.threads
        stop = threading.Event()

        def writer():
            i = 0
            while not stop.is_set():
                i += 1
                t1.execute(K_UPDATE, [3, i])

        w = threading.Thread(target=writer)
        w.start()
        try:
            for _ in range(300):
                outcome = t2.execute(K_READ, [3])
                assert outcome.committed
        finally:
            stop.set()
            w.join()
    assert check_gsi(cluster.events.snapshot()) == []


def test_abort_resets_exactly_acquired_locks():
    """Write-set of two records where the second is already locked: the CAS
    on the first succeeds, the second fails, and abort resets only the first."""
    cluster, meta = kv_cluster()

    def two_writes(ops, params):
        a, b = params
        ra = ops.read("kv", a)
        rb = ops.read("kv", b)
        ops.update("kv", a, ra)
        ops.update("kv", b, rb)

    cluster.register_statement(FIRST_USER_STMT + 9, two_writes)
    ht = HashTable(cluster.fabric, meta)
    addr_a, addr_b = ht.get(11), ht.get(12)
    with cluster:
        # foreign lock on record b
        word_b, _ = cluster._store.read_current(addr_b, meta.layout)
        cluster._store.lock(addr_b, word_b)
        outcome = cluster.threads[0].execute(FIRST_USER_STMT + 9, [11, 12], retry_cap=0)
        assert not outcome.committed and outcome.reason == "conflict"
        wa, _ = cluster._store.read_current(addr_a, meta.layout)
        wb, _ = cluster._store.read_current(addr_b, meta.layout)
        assert wa & LOCKED_BIT == 0      # acquired lock was reset
        assert wb & LOCKED_BIT == 1      # foreign lock untouched
        cluster._store.unlock(addr_b, word_b)


def test_repeated_writes_to_one_record_collapse():
    """Two updates of the same key in one transaction: one installed version,
    last payload wins."""
    cluster, meta = kv_cluster()

    def double_write(ops, params):
        (key,) = params
        ops.read("kv", key)
        ops.update("kv", key, VAL.pack(111))
        ops.update("kv", key, VAL.pack(222))

    cluster.register_statement(FIRST_USER_STMT + 9, double_write)
    with cluster:
        assert cluster.threads[0].execute(FIRST_USER_STMT + 9, [4]).committed
        value, header = read_value(cluster, meta, 4)
        assert value == 222
        assert header.counter == 1  # a single installed version
    assert check_gsi(cluster.events.snapshot()) == []


def test_insert_visibility_across_snapshots():
    cluster, meta = kv_cluster()
    with cluster:
        thread = cluster.threads[0]
        before = cluster.current_vector()
        outcome = thread.execute(K_INSERT, [500, 77])
        assert outcome.committed
        after = cluster.current_vector()
        # not visible to the pre-insert snapshot
        ht = HashTable(cluster.fabric, meta)
        addr = ht.get(500)
        with pytest.raises(VersionNotFound):
            cluster._store.find_version(addr, meta.layout, before)
        value, _ = read_value(cluster, meta, 500, after)
        assert value == 77
    assert check_gsi(cluster.events.snapshot()) == []


def test_duplicate_insert_aborts():
    cluster, meta = kv_cluster()
    with cluster:
        thread = cluster.threads[0]
        assert thread.execute(K_INSERT, [600, 1]).committed
        outcome = thread.execute(K_INSERT, [600, 2], retry_cap=0)
        assert not outcome.committed
        value, _ = read_value(cluster, meta, 600)
        assert value == 1


def test_delete_produces_tombstone():
    cluster, meta = kv_cluster()

    def deleter(ops, params):
        (key,) = params
        ops.read("kv", key)
        ops.delete("kv", key)

    cluster.register_statement(FIRST_USER_STMT + 9, deleter)
    with cluster:
        thread = cluster.threads[0]
        before = cluster.current_vector()
        assert thread.execute(FIRST_USER_STMT + 9, [13]).committed
        after = cluster.current_vector()
        ht = HashTable(cluster.fabric, meta)
        addr = ht.get(13)
        with pytest.raises(VersionNotFound):
            cluster._store.find_version(addr, meta.layout, after)
        found = cluster._store.find_version(addr, meta.layout, before)
        assert found.header.counter > 0  # old snapshot still sees it
    assert check_gsi(cluster.events.snapshot()) == []


# -- catalog --

def test_catalog_resolve_and_cache():
    cluster, meta = kv_cluster()
    cache = cluster.computes[0].catalog
    cache.begin_txn()
    entry = cache.resolve("kv")
    assert entry["kind"] == "table"
    owner = cache.owner_of("kv")
    before = cluster.fabric.server(owner).handler_invocations
    for _ in range(10):
        cache.begin_txn()
        cache.resolve("kv")
    assert cluster.fabric.server(owner).handler_invocations == before  # cache hits


def test_catalog_alter_bumps_counter_and_refreshes():
    cluster, meta = kv_cluster()
    cache = cluster.computes[0].catalog
    cache.begin_txn()
    assert cache.resolve("kv")["payload_len"] == VAL.size
    owner = cache.owner_of("kv")
    entry = dict(cluster.catalog_services[owner].objects["kv"])
    entry["note"] = "altered"
    cluster.fabric.request(owner, ("catalog_put", "kv", entry))
    cache.begin_txn()  # next transaction observes the bumped counter
    assert cache.resolve("kv").get("note") == "altered"


def test_catalog_unknown_object():
    cluster, meta = kv_cluster()
    cache = cluster.computes[0].catalog
    cache.begin_txn()
    with pytest.raises(Exception):
        cache.resolve("nope")


# -- journals --

def test_journal_replicas_identical_and_ordered():
    cluster, meta = kv_cluster()
    with cluster:
        thread = cluster.threads[0]
        for i in range(1, 6):
            thread.execute(K_UPDATE, [2, i])
        targets = cluster.journal_regions[thread.label]
        assert len(targets) == 2
        raws = []
        for sid, rid in targets:
            n = cluster.fabric.read_word(RemoteAddr(sid, rid, 0))
            raws.append(cluster.fabric.read(RemoteAddr(sid, rid, 8), n))
        assert raws[0] == raws[1]
        from fabdb.recovery import decode_entries, STMT_COMMIT

        entries = decode_entries(raws[0])
        commits = [e for e in entries if e.stmt_id == STMT_COMMIT]
        assert [c.params[1] for c in commits] == [1, 2, 3, 4, 5]  # execution order


def test_journal_survives_one_replica_failure():
    cluster, meta = kv_cluster()
    with cluster:
        thread = cluster.threads[0]
        thread.execute(K_UPDATE, [2, 1])
        cluster.fabric.fail_server(cluster.journal_regions[thread.label][1][0])
        outcome = thread.execute(K_UPDATE, [2, 2])
        # the write to key 2's record may live on the failed server; only the
        # journal path is asserted degraded-but-alive here
        assert thread.journal.degraded or not outcome.committed
        cluster.fabric.recover_server(cluster.journal_regions[thread.label][1][0])


# -- locality --

def test_locality_fast_path_identical_results():
    results = {}
    for locality in (False, True):
        cluster, meta = kv_cluster(locality=locality, compute_servers=2,
                                   threads_per_server=1)
        with cluster:
            for i, thread in enumerate(cluster.threads):
                for j in range(1, 21):
                    assert thread.execute(K_UPDATE, [i + 1, j]).committed
        results[locality] = cluster.state_hash()
        assert check_gsi(cluster.events.snapshot()) == []
    assert results[False] == results[True]


def test_locality_reduces_verb_counts():
    counts = {}
    for locality in (False, True):
        cluster, meta = kv_cluster(locality=locality, compute_servers=1,
                                   threads_per_server=1, memory_servers=1)
        with cluster:
            for j in range(1, 30):
                cluster.threads[0].execute(K_UPDATE, [1, j])
        counts[locality] = sum(
            cluster.fabric.server(0).verb_counts[k] for k in ("read", "write")
        )
    assert counts[True] < counts[False]


# -- end-to-end GSI over oracle modes --

def run_mini_mix(cluster, n_per_thread=150):
    threads = []

    def work(thread, seed):
        import random

        rng = random.Random(seed)
        for _ in range(n_per_thread):
            key = rng.randint(1, 16)
            if rng.random() < 0.5:
                thread.execute(K_RMW, [key])
            else:
                thread.execute(K_READ, [key])

    with cluster:
        for i, t in enumerate(cluster.threads):
            th = threading.Thread(target=work, args=(t, 1000 + i))
            threads.append(th)
            th.start()
        for th in threads:
            th.join()
    return cluster.events.snapshot()


@pytest.mark.parametrize("oracle_kw", [
    {"mode": "vector"},
    {"mode": "vector", "fetch_thread": True},
    {"mode": "vector", "compress": True},
    {"mode": "vector", "partitions": 2},
    {"mode": "naive"},
])
def test_gsi_clean_across_oracle_modes(oracle_kw):
    cluster, meta = kv_cluster(threads_per_server=2, compute_servers=2,
                               oracle=dict(oracle_kw))
    events = run_mini_mix(cluster)
    assert check_gsi(events) == []


def test_oracle_reconfiguration_freezes_after_start():
    import conftest
    from fabdb.errors import ConfigFrozen

    cluster = conftest.small_cluster(compute_servers=2, threads_per_server=2)
    assert cluster.vector.n_slots == 4 + 1
    cluster.configure_oracle(compress=True)  # allowed before start
    assert cluster.vector.n_slots == 2 + 1
    cluster.configure_oracle(partitions=2)
    assert cluster.vector.partitions == 2
    with pytest.raises(ValueError):
        cluster.configure_oracle(partitions=9)  # more partitions than servers
    assert cluster.config.oracle.partitions == 2  # rejected change not applied
    cluster.configure_oracle(partitions=1)
    with cluster:
        with pytest.raises(ConfigFrozen):
            cluster.configure_oracle(compress=False)
        with pytest.raises(ConfigFrozen):
            cluster.configure_oracle(partitions=2)


def test_compression_shrinks_slot_count():
    """Per-thread mode: one slot per execution thread; compressed: one per
    compute server (plus the loader slot in both cases)."""
    import conftest

    per_thread = conftest.small_cluster(
        compute_servers=4, threads_per_server=15, oracle=dict(mode="vector"))
    compressed = conftest.small_cluster(
        compute_servers=4, threads_per_server=15, oracle=dict(mode="vector", compress=True))
    assert per_thread.vector.n_slots == 60 + 1
    assert compressed.vector.n_slots == 4 + 1
    assert len({t.slot for t in per_thread.threads}) == 60
    assert len({t.slot for t in compressed.threads}) == 4
    # compressed headers carry the compute-server id as the thread id
    assert all(t.slot == t.compute.index for t in compressed.threads)


def test_prefetch_mode_threads_issue_no_vector_reads():
    cluster, meta = kv_cluster(oracle=dict(mode="vector", fetch_thread=True))
    with cluster:
        thread = cluster.threads[0]
        vec_region = cluster.vector.regions[0]
        vec_server = cluster.vector.servers[0]
        # drain whatever load did, then measure transaction-driven reads
        import time
        before = None
        for _ in range(50):
            thread.execute(K_RMW, [1])
        # the only reader of the vector region must be the fetch thread; the
        # exec thread's own connection never reads it
        conn = cluster.fabric.conn(vec_server)
        assert conn.counts.get("read", 0) >= 0  # connection exists
        snap1 = thread.snapshot()
        reads_before = thread.cluster.fabric.conn(vec_server).counts["read"]
        for _ in range(20):
            thread.snapshot()
        reads_after = thread.cluster.fabric.conn(vec_server).counts["read"]
        assert reads_after == reads_before  # consumption is local
