import random
from collections import Counter

import pytest

from fabdb.errors import DuplicateKey, KeyNotFound
from fabdb.index import (
    BPlusTree,
    BPlusTreePartition,
    BTreeMeta,
    FNV_OFFSET,
    HashTable,
    SecondaryHashIndex,
    fnv1a_64,
    hash_key,
)
from fabdb.fabric import pack_addr, unpack_addr


def test_fnv1a_reference_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64(b"") == 14695981039346656037
    assert fnv1a_64(b"") == FNV_OFFSET
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_fnv1a_deterministic_and_avalanche():
    assert fnv1a_64(b"key") == fnv1a_64(b"key")
    assert fnv1a_64(b"a") != fnv1a_64(b"b")


def make_table(cluster, expected=256):
    return cluster.create_table("t", payload_len=16, expected_records=expected, buffer_slots=4)


def test_put_then_get_same_address(cluster4):
    meta = make_table(cluster4)
    ht = HashTable(cluster4.fabric, meta)
    addr = ht.allocate_record(42)
    cluster4._store.create_record(addr, meta.layout, b"x" * 16, __import__("fabdb.oracle", fromlist=["CommitTimestamp"]).CommitTimestamp(0, 1))
    ht.put(42, addr)
    assert ht.get(42) == addr


def test_get_absent_key(cluster4):
    meta = make_table(cluster4)
    ht = HashTable(cluster4.fabric, meta)
    with pytest.raises(KeyNotFound):
        ht.get(4242)


def test_duplicate_key_rejected(cluster4):
    meta = make_table(cluster4)
    ht = HashTable(cluster4.fabric, meta)
    addr = ht.allocate_record(7)
    ht.put(7, addr)
    with pytest.raises(DuplicateKey):
        ht.put(7, addr)


def test_placement_deterministic_and_balanced(cluster4):
    """Keys resolve on exactly server_of(key), computed client-side, and the
    distribution over 4 servers is within +-20% of uniform."""
    meta = make_table(cluster4, expected=2048)
    ht = HashTable(cluster4.fabric, meta)
    counts = Counter()
    for key in range(1, 1001):
        si = meta.server_index_of(key)
        assert meta.server_of(key) == meta.servers[si]
        assert meta.bucket_addr(key).server_id == meta.server_of(key)
        counts[meta.server_of(key)] += 1
    for sid, n in counts.items():
        assert 0.8 * 250 <= n <= 1.2 * 250, f"server {sid} got {n}"
    # placement is also where the bytes actually go
    key = 123
    addr = ht.allocate_record(key)
    ht.put(key, addr)
    assert addr.server_id == meta.server_of(key)


def test_bucket_chain_overflow(cluster4):
    """More colliding keys than one bucket's slots spill into a continuation
    chunk allocated one-sided."""
    meta = make_table(cluster4, expected=64)
    ht = HashTable(cluster4.fabric, meta)
    target = meta.bucket_of(1)
    colliders = [k for k in range(1, 200_000) if meta.bucket_of(k) == target][:12]
    assert len(colliders) == 12
    for k in colliders:
        ht.put(k, ht.allocate_record(k))
    for k in colliders:
        assert ht.get(k).server_id == meta.server_of(k)


def test_hash_ops_issue_no_two_sided_calls(cluster4):
    meta = make_table(cluster4)
    ht = HashTable(cluster4.fabric, meta)
    before = {sid: cluster4.fabric.server(sid).handler_invocations for sid in meta.servers}
    for k in range(1, 30):
        ht.put(k, ht.allocate_record(k))
        ht.get(k)
    after = {sid: cluster4.fabric.server(sid).handler_invocations for sid in meta.servers}
    assert before == after


def test_secondary_index_lookup_and_duplicates(cluster4):
    meta = cluster4.create_hash_index("name_idx", 256)
    idx = SecondaryHashIndex(cluster4.fabric, meta)
    idx.insert(1001, 7)
    assert idx.lookup(1001) == [7]
    idx.insert(1001, 9)
    assert sorted(idx.lookup(1001)) == [7, 9]
    assert idx.lookup(555) == []


def test_secondary_index_matches_reference_map(cluster4):
    meta = cluster4.create_hash_index("ref_idx", 1024)
    idx = SecondaryHashIndex(cluster4.fabric, meta)
    rng = random.Random(3)
    reference: dict[int, set] = {}
    for _ in range(400):
        attr = rng.randint(1, 50)
        pkey = rng.randint(1, 10_000)
        if pkey not in reference.get(attr, set()):
            idx.insert(attr, pkey)
            reference.setdefault(attr, set()).add(pkey)
    for _ in range(60):
        attr = rng.choice(list(reference))
        victim = rng.choice(sorted(reference[attr]))
        idx.remove(attr, victim)
        reference[attr].discard(victim)
    for attr in range(1, 51):
        assert set(idx.lookup(attr)) == reference.get(attr, set())


# -- B+-tree --

def test_btree_partition_basics():
    tree = BPlusTreePartition(order=4)
    tree.insert(5, 50)
    assert tree.lookup(5) == [50]
    assert tree.lookup(6) == []
    assert tree.range(1, 10) == [(5, 50)]
    assert BPlusTreePartition(order=4).range(0, 100) == []


def test_btree_partition_matches_sorted_reference():
    tree = BPlusTreePartition(order=8)
    rng = random.Random(11)
    reference: dict[int, list] = {}
    for _ in range(3000):
        k = rng.randint(0, 5000)
        v = rng.randint(0, 1 << 30)
        tree.insert(k, v)
        reference.setdefault(k, []).append(v)
    for _ in range(100):
        lo = rng.randint(0, 5000)
        hi = lo + rng.randint(0, 800)
        expected = [(k, v) for k in sorted(reference) if lo <= k <= hi for v in reference[k]]
        assert tree.range(lo, hi) == expected
    for k in rng.sample(sorted(reference), 50):
        assert sorted(tree.lookup(k)) == sorted(reference[k])


def test_btree_cross_partition_range(cluster4):
    meta = cluster4.create_btree("bt", 0, 4000, order=16)
    tree = BPlusTree(cluster4.fabric, meta)
    for k in range(0, 4000, 7):
        tree.insert(k, k * 10)
    got = tree.range(500, 3500)
    expected = [(k, k * 10) for k in range(0, 4000, 7) if 500 <= k <= 3500]
    assert got == expected
    assert tree.lookup(7) == [70]
    with pytest.raises(ValueError):
        tree.range(10, 5)


def test_btree_ops_issue_no_one_sided_verbs(cluster4):
    meta = cluster4.create_btree("bt2", 0, 1000, order=16)
    tree = BPlusTree(cluster4.fabric, meta)
    sided = ("read", "write", "faa", "cas")
    before = {sid: {k: cluster4.fabric.server(sid).verb_counts[k] for k in sided}
              for sid in meta.servers}
    for k in range(100):
        tree.insert(k, k)
    tree.range(0, 99)
    after = {sid: {k: cluster4.fabric.server(sid).verb_counts[k] for k in sided}
             for sid in meta.servers}
    assert before == after


def test_btree_meta_partition_routing():
    meta = BTreeMeta.split_range("x", 0, 99, (0, 1, 2, 3), order=8)
    assert meta.bounds == (0, 25, 50, 75)
    assert meta.partition_of(0) == 0
    assert meta.partition_of(24) == 0
    assert meta.partition_of(25) == 1
    assert meta.partition_of(99) == 3
