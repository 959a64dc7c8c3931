"""Table and index structures.

Tables are partitioned hash tables driven entirely by one-sided verbs: the
bucket array is split into equal ranges across memory servers, so any client
computes the owning server from the key alone. Bucket chains are clustered
C entries to a contiguous 136-byte chunk read with one verb; chain overflow
bump-allocates continuation chunks from a per-table chain area via
fetch-and-add (still one-sided).

Secondary hash indexes reuse the bucket structure but store bare primary
keys and no version information; version filtering happens at the table.

The B+-tree is range-partitioned; each partition lives behind its owning
server's message handler (two-sided), because tree descent would otherwise
cost one round trip per level. Partition handlers serialize structural
changes with a per-partition lock.
"""

from __future__ import annotations

import bisect
import threading
import time
from dataclasses import dataclass

from .errors import DuplicateKey, KeyNotFound, OutOfMemory
from .fabric import Fabric, RemoteAddr, WORD, pack_addr, unpack_addr
from .memstore import RecordLayout

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_U64 = (1 << 64) - 1

CHAIN_SLOTS = 8
BUCKET_SIZE = CHAIN_SLOTS * 2 * WORD + WORD  # C key/value pairs + continuation ptr
TOMBSTONE_KEY = _U64


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


def hash_key(key: int) -> int:
    return fnv1a_64(int(key).to_bytes(8, "little"))


@dataclass(frozen=True)
class HashTableMeta:
    """Client-side placement metadata for one hash table (from the catalog)."""

    name: str
    n_buckets: int
    servers: tuple[int, ...]          # bucket-range owners, in range order
    heap_regions: tuple[int, ...]     # heap region id per server
    bucket_offs: tuple[int, ...]      # bucket-extend offset per server
    chain_capacities: tuple[int, ...]  # chain area bytes per server
    shard_offs: tuple[int, ...]       # record-extend offset per server
    shard_capacities: tuple[int, ...]
    layout: RecordLayout

    def bucket_of(self, key: int) -> int:
        return hash_key(key) % self.n_buckets

    def server_index_of(self, key: int) -> int:
        return self.bucket_of(key) * len(self.servers) // self.n_buckets

    def server_of(self, key: int) -> int:
        return self.servers[self.server_index_of(key)]

    def first_bucket(self, server_index: int) -> int:
        return server_index * self.n_buckets // len(self.servers)

    def buckets_on(self, server_index: int) -> int:
        return self.first_bucket(server_index + 1) - self.first_bucket(server_index)

    def bucket_addr(self, key: int) -> RemoteAddr:
        si = self.server_index_of(key)
        local = self.bucket_of(key) - self.first_bucket(si)
        return RemoteAddr(
            self.servers[si], self.heap_regions[si], self.bucket_offs[si] + local * BUCKET_SIZE
        )

    def chain_alloc_addr(self, si: int) -> RemoteAddr:
        off = self.bucket_offs[si] + self.buckets_on(si) * BUCKET_SIZE
        return RemoteAddr(self.servers[si], self.heap_regions[si], off)

    def bucket_extent_size(self, si: int) -> int:
        return self.buckets_on(si) * BUCKET_SIZE + WORD + self.chain_capacities[si]

    def shard_alloc_addr(self, si: int) -> RemoteAddr:
        return RemoteAddr(self.servers[si], self.heap_regions[si], self.shard_offs[si])


def _parse_bucket(raw: bytes):
    pairs = []
    for i in range(CHAIN_SLOTS):
        k = int.from_bytes(raw[16 * i: 16 * i + 8], "little")
        v = int.from_bytes(raw[16 * i + 8: 16 * i + 16], "little")
        pairs.append((k, v))
    cont = int.from_bytes(raw[16 * CHAIN_SLOTS: 16 * CHAIN_SLOTS + 8], "little")
    return pairs, cont


class HashTable:
    """One-sided operations against a HashTableMeta placement."""

    def __init__(self, fabric: Fabric, meta: HashTableMeta):
        self.fabric = fabric
        self.meta = meta

    # -- lookups --

    def get(self, key: int) -> RemoteAddr:
        addr = self.meta.bucket_addr(key)
        spins = 0
        while True:
            raw = self.fabric.read(addr, BUCKET_SIZE)
            pairs, cont = _parse_bucket(raw)
            for k, v in pairs:
                if k == key:
                    if v == 0:
                        break  # slot claimed, record pointer not yet written
                    return unpack_addr(v)
            else:
                if cont:
                    addr = unpack_addr(cont)
                    continue
                raise KeyNotFound(f"{self.meta.name}: key {key}")
            # a claim without a record pointer is an in-flight (or abandoned)
            # insert; its commit counter cannot be published yet, so after a
            # bounded wait it is simply not visible
            spins += 1
            if spins > 20:
                raise KeyNotFound(f"{self.meta.name}: key {key} (pending insert)")
            time.sleep(0.0001)

    # -- inserts --

    def put(self, key: int, record_addr: RemoteAddr) -> None:
        """Publish key -> record_addr; the record block must already be written."""
        if key == 0 or key == TOMBSTONE_KEY:
            raise ValueError("key 0 and all-ones are reserved")
        packed = pack_addr(record_addr)
        addr = self.meta.bucket_addr(key)
        si = self.meta.server_index_of(key)
        while True:
            raw = self.fabric.read(addr, BUCKET_SIZE)
            pairs, cont = _parse_bucket(raw)
            if any(k == key for k, _ in pairs):
                raise DuplicateKey(f"{self.meta.name}: key {key}")
            claimed = False
            for i, (k, _) in enumerate(pairs):
                if k == 0 or k == TOMBSTONE_KEY:
                    won = self.fabric.compare_and_swap(addr.shifted(16 * i), k, key)
                    if won == k:
                        claimed = True
                        self.fabric.write_word(addr.shifted(16 * i + 8), packed)
                        return
                    if won == key:
                        raise DuplicateKey(f"{self.meta.name}: key {key}")
                    break  # someone claimed this slot; rescan
            if claimed:
                return
            if any(k in (0, TOMBSTONE_KEY) for k, _ in pairs):
                continue  # lost a slot race; rescan the bucket
            if cont:
                addr = unpack_addr(cont)
                continue
            addr = self._extend_chain(addr, si)

    def _extend_chain(self, bucket_addr: RemoteAddr, si: int) -> RemoteAddr:
        alloc = self.meta.chain_alloc_addr(si)
        off = self.fabric.fetch_and_add(alloc, BUCKET_SIZE)
        if off + BUCKET_SIZE > self.meta.chain_capacities[si]:
            raise OutOfMemory(f"{self.meta.name}: chain area full on server {self.meta.servers[si]}")
        cont_addr = RemoteAddr(alloc.server_id, alloc.region_id, alloc.offset + WORD + off)
        packed = pack_addr(cont_addr)
        won = self.fabric.compare_and_swap(bucket_addr.shifted(16 * CHAIN_SLOTS), 0, packed)
        if won == 0:
            return cont_addr
        return unpack_addr(won)  # lost the race; use the winner's continuation

    def allocate_record(self, key: int) -> RemoteAddr:
        """Bump-allocate a record block on the key's owning server (one FAA)."""
        si = self.meta.server_index_of(key)
        alloc = self.meta.shard_alloc_addr(si)
        block = self.meta.layout.block_size
        off = self.fabric.fetch_and_add(alloc, block)
        if off + block > self.meta.shard_capacities[si]:
            raise OutOfMemory(f"{self.meta.name}: record extend full on server {self.meta.servers[si]}")
        return RemoteAddr(alloc.server_id, alloc.region_id, self.meta.shard_offs[si] + off)

    def scan_record_addrs(self, si: int):
        """Record block addresses on one server, in allocation order."""
        used = self.fabric.read_word(self.meta.shard_alloc_addr(si))
        block = self.meta.layout.block_size
        n = (used - 2 * WORD) // block
        base = self.meta.shard_offs[si] + 2 * WORD
        return [
            RemoteAddr(self.meta.servers[si], self.meta.heap_regions[si], base + i * block)
            for i in range(n)
        ]


class SecondaryHashIndex:
    """Hash index mapping a secondary attribute to primary keys; no versions."""

    def __init__(self, fabric: Fabric, meta: HashTableMeta):
        self.fabric = fabric
        self.meta = meta

    def lookup(self, attr: int) -> list[int]:
        addr = self.meta.bucket_addr(attr)
        out: list[int] = []
        while True:
            raw = self.fabric.read(addr, BUCKET_SIZE)
            pairs, cont = _parse_bucket(raw)
            out.extend(v for k, v in pairs if k == attr and v != 0)
            if not cont:
                return out
            addr = unpack_addr(cont)

    def insert(self, attr: int, pkey: int) -> None:
        if attr == 0 or attr == TOMBSTONE_KEY:
            raise ValueError("attr 0 and all-ones are reserved")
        addr = self.meta.bucket_addr(attr)
        si = self.meta.server_index_of(attr)
        ht = HashTable(self.fabric, self.meta)
        while True:
            raw = self.fabric.read(addr, BUCKET_SIZE)
            pairs, cont = _parse_bucket(raw)
            progressed = False
            for i, (k, _) in enumerate(pairs):
                if k == 0 or k == TOMBSTONE_KEY:
                    won = self.fabric.compare_and_swap(addr.shifted(16 * i), k, attr)
                    if won == k:
                        self.fabric.write_word(addr.shifted(16 * i + 8), pkey)
                        return
                    progressed = True
                    break
            if progressed:
                continue
            if cont:
                addr = unpack_addr(cont)
                continue
            addr = ht._extend_chain(addr, si)

    def remove(self, attr: int, pkey: int) -> None:
        addr = self.meta.bucket_addr(attr)
        while True:
            raw = self.fabric.read(addr, BUCKET_SIZE)
            pairs, cont = _parse_bucket(raw)
            for i, (k, v) in enumerate(pairs):
                if k == attr and v == pkey:
                    self.fabric.write_word(addr.shifted(16 * i + 8), 0)
                    self.fabric.compare_and_swap(addr.shifted(16 * i), attr, TOMBSTONE_KEY)
                    return
            if not cont:
                return
            addr = unpack_addr(cont)


# -- B+-tree (two-sided) --


class _Node:
    __slots__ = ("leaf", "keys", "children", "values", "next")

    def __init__(self, leaf: bool):
        self.leaf = leaf
        self.keys: list[int] = []
        self.children: list[_Node] = []
        self.values: list[list[int]] = []
        self.next: _Node | None = None


class BPlusTreePartition:
    """One range partition, owned by a memory-server handler."""

    def __init__(self, order: int = 64):
        if order < 4:
            raise ValueError("order too small")
        self.order = order
        self.root = _Node(leaf=True)
        self.lock = threading.Lock()

    def insert(self, key: int, value: int) -> None:
        with self.lock:
            split = self._insert(self.root, key, value)
            if split:
                up_key, right = split
                root = _Node(leaf=False)
                root.keys = [up_key]
                root.children = [self.root, right]
                self.root = root

    def _insert(self, node: _Node, key: int, value: int):
        if node.leaf:
            i = bisect.bisect_left(node.keys, key)
            if i < len(node.keys) and node.keys[i] == key:
                node.values[i].append(value)
                return None
            node.keys.insert(i, key)
            node.values.insert(i, [value])
        else:
            i = bisect.bisect_right(node.keys, key)
            split = self._insert(node.children[i], key, value)
            if split:
                up_key, right = split
                node.keys.insert(i, up_key)
                node.children.insert(i + 1, right)
        if len(node.keys) > self.order:
            return self._split(node)
        return None

    def _split(self, node: _Node):
        mid = len(node.keys) // 2
        right = _Node(node.leaf)
        if node.leaf:
            up_key = node.keys[mid]
            right.keys = node.keys[mid:]
            right.values = node.values[mid:]
            node.keys = node.keys[:mid]
            node.values = node.values[:mid]
            right.next = node.next
            node.next = right
        else:
            up_key = node.keys[mid]
            right.keys = node.keys[mid + 1:]
            right.children = node.children[mid + 1:]
            node.keys = node.keys[:mid]
            node.children = node.children[:mid + 1]
        return up_key, right

    def lookup(self, key: int) -> list[int]:
        with self.lock:
            node = self.root
            while not node.leaf:
                node = node.children[bisect.bisect_right(node.keys, key)]
            i = bisect.bisect_left(node.keys, key)
            if i < len(node.keys) and node.keys[i] == key:
                return list(node.values[i])
            return []

    def range(self, lo: int, hi: int) -> list[tuple[int, int]]:
        with self.lock:
            node = self.root
            while not node.leaf:
                node = node.children[bisect.bisect_right(node.keys, lo)]
            out: list[tuple[int, int]] = []
            while node is not None:
                for i, k in enumerate(node.keys):
                    if k > hi:
                        return out
                    if k >= lo:
                        out.extend((k, v) for v in node.values[i])
                node = node.next
            return out

    def handle(self, op: str, args: tuple):
        if op == "insert":
            self.insert(*args)
            return True
        if op == "lookup":
            return self.lookup(*args)
        if op == "range":
            return self.range(*args)
        raise ValueError(f"unknown btree op {op}")


@dataclass(frozen=True)
class BTreeMeta:
    """Client-side placement: sorted partition lower bounds and their owners."""

    name: str
    bounds: tuple[int, ...]   # bounds[i] = inclusive lower key of partition i
    servers: tuple[int, ...]
    order: int = 64

    def partition_of(self, key: int) -> int:
        return max(0, bisect.bisect_right(self.bounds, key) - 1)

    @staticmethod
    def split_range(name: str, lo: int, hi: int, servers: tuple[int, ...], order: int = 64) -> "BTreeMeta":
        n = len(servers)
        span = max(1, (hi - lo + 1))
        bounds = tuple(lo + span * i // n for i in range(n))
        return BTreeMeta(name, bounds, servers, order)


class BPlusTree:
    """Client side of the range-partitioned tree; all ops are two-sided."""

    def __init__(self, fabric: Fabric, meta: BTreeMeta):
        self.fabric = fabric
        self.meta = meta

    def _call(self, part: int, op: str, *args):
        return self.fabric.request(
            self.meta.servers[part], ("btree", self.meta.name, part, op, args)
        )

    def insert(self, key: int, pkey: int) -> None:
        self._call(self.meta.partition_of(key), "insert", key, pkey)

    def lookup(self, key: int) -> list[int]:
        return self._call(self.meta.partition_of(key), "lookup", key)

    def range(self, lo: int, hi: int) -> list[tuple[int, int]]:
        if lo > hi:
            raise ValueError("lo must be <= hi")
        first = self.meta.partition_of(lo)
        last = self.meta.partition_of(hi)
        out: list[tuple[int, int]] = []
        for part in range(first, last + 1):
            out.extend(self._call(part, "range", lo, hi))
        return out
