"""Compute-server transaction engine and cluster assembly.

Execution threads run transactions in a closed loop: acquire a snapshot,
build read- and write-sets through the record store and indexes, mint a
commit timestamp, then validate-and-lock every write-set record with one CAS
each (all entries attempted, no short-circuit), journal, install, and publish.
Any validation failure resets exactly the locks that were acquired and
publishes the commit counter anyway so the thread's slot never has gaps.

The catalog is hash-partitioned over memory servers and served two-sided;
compute servers cache entries and revalidate them against a per-server
version counter word (a one-sided read) once per transaction.

A compute server may be co-located with a memory server: plain reads and
writes then bypass the fabric, but atomics always go through fabric verbs
(CPU and fabric atomics would not be mutually safe), and results must be
identical either way.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

from . import recovery
from .checker import EventLog
from .errors import (
    BufferStall,
    OutOfMemory,
    ConfigFrozen,
    Conflict,
    DuplicateKey,
    Infrastructure,
    KeyNotFound,
    ServerUnavailable,
    SimulatedCrash,
    StalePending,
    TransactionAbort,
    UnknownObject,
    VersionChanged,
    VersionGarbageCollected,
    VersionNotFound,
)
from .fabric import Fabric, LatencyProfile, RemoteAddr, WORD, pack_addr, unpack_addr
from .index import (
    BPlusTree,
    BPlusTreePartition,
    BTreeMeta,
    BUCKET_SIZE,
    CHAIN_SLOTS,
    HashTable,
    HashTableMeta,
    SecondaryHashIndex,
    TOMBSTONE_KEY,
    fnv1a_64,
)
from .memstore import (
    GarbageCollector,
    GcSnapshotList,
    LOCKED_BIT,
    RecordLayout,
    RecordStore,
    ServerMemory,
    VersionMover,
    header_decode,
)
from .oracle import (
    CommitTimestamp,
    NaiveOracle,
    OracleOptions,
    PrefetchedVector,
    ThreadSlotWriter,
    VectorOracle,
)

STMT_LOCK_INTENT = 0
STMT_COMMIT = 1
FIRST_USER_STMT = 10

_CATALOG_COUNTER_OFF = 0
_HEARTBEAT_BASE = 64


@dataclass
class ClusterConfig:
    memory_servers: int = 2
    compute_servers: int = 1
    threads_per_server: int = 1
    oracle: OracleOptions = field(default_factory=OracleOptions)
    latency: LatencyProfile = field(default_factory=LatencyProfile)
    heap_size: int = 32 << 20
    overflow_size: int = 8 << 20
    buffer_slots: int = 16
    stall_timeout: float = 0.002
    log_replicas: int = 2
    journal_size: int = 4 << 20
    heartbeat_period: float = 0.05
    heartbeat_misses: int = 4
    monitoring: bool = False
    locality: bool = False
    retry_cap: int = 100
    mover_period: float = 0.0005
    gc_enabled: bool = False
    gc_interval: float = 60.0
    gc_max_exec_time: float = 3600.0
    capture_events: bool = True
    event_capacity: int = 10_000_000

    @property
    def total_threads(self) -> int:
        return self.compute_servers * self.threads_per_server


class LocalityFabric:
    """Fabric facade that serves plain reads/writes from local memory when the
    target server is co-located. Atomics and two-sided calls always go through
    the fabric, and local accesses still honor server availability."""

    def __init__(self, fabric: Fabric, co_located: int | None):
        self.fabric = fabric
        self.co_located = co_located

    def _local(self, server_id: int):
        if self.co_located is not None and server_id == self.co_located:
            server = self.fabric.server(server_id)
            if not server.available:
                raise ServerUnavailable(f"server {server_id} is failed")
            return server
        return None

    def read(self, addr: RemoteAddr, length: int) -> bytes:
        server = self._local(addr.server_id)
        if server is not None:
            return server.local_read(addr.region_id, addr.offset, length)
        return self.fabric.read(addr, length)

    def write(self, addr: RemoteAddr, payload: bytes, signaled: bool = False):
        server = self._local(addr.server_id)
        if server is not None:
            server.local_write(addr.region_id, addr.offset, payload)
            return None
        return self.fabric.write(addr, payload, signaled)

    def read_word(self, addr: RemoteAddr) -> int:
        return int.from_bytes(self.read(addr, WORD), "little")

    def write_word(self, addr: RemoteAddr, value: int, signaled: bool = False):
        return self.write(addr, value.to_bytes(WORD, "little"), signaled)

    def fetch_and_add(self, addr: RemoteAddr, increment: int) -> int:
        return self.fabric.fetch_and_add(addr, increment)

    def compare_and_swap(self, addr: RemoteAddr, check: int, new: int) -> int:
        return self.fabric.compare_and_swap(addr, check, new)

    def request(self, server_id: int, payload: Any) -> Any:
        return self.fabric.request(server_id, payload)

    def conn(self, server_id: int):
        return self.fabric.conn(server_id)


class CatalogService:
    """Server-side catalog shard plus memory-management endpoints."""

    def __init__(self, cluster: "Cluster", server_id: int):
        self.cluster = cluster
        self.server_id = server_id
        self.objects: dict[str, dict] = {}
        self.btrees: dict[tuple[str, int], BPlusTreePartition] = {}
        self._lock = threading.Lock()

    def bump_version(self) -> None:
        server = self.cluster.fabric.server(self.server_id)
        region = self.cluster.meta_regions[self.server_id]
        with self._lock:
            v = server.local_read_word(region, _CATALOG_COUNTER_OFF)
            server.local_write_word(region, _CATALOG_COUNTER_OFF, v + 1)

    def handle(self, payload: tuple) -> Any:
        op, *args = payload
        memory = self.cluster.memories[self.server_id]
        if op == "catalog_get":
            (name,) = args
            entry = self.objects.get(name)
            if entry is None:
                raise UnknownObject(name)
            return json.loads(json.dumps(entry))
        if op == "catalog_put":
            name, entry = args
            self.objects[name] = entry
            self.bump_version()
            return True
        if op == "extend_alloc":
            size, hint = args
            return memory.allocate_extend(size, hint)
        if op == "extend_free":
            off, size = args
            memory.free_extend(off, size)
            return True
        if op == "shard_add":
            heap_off, capacity, payload_len, buffer_slots = args
            memory.add_shard(heap_off, capacity, RecordLayout(payload_len, buffer_slots))
            return True
        if op == "btree_create":
            name, part, order = args
            self.btrees[(name, part)] = BPlusTreePartition(order)
            return True
        if op == "btree":
            name, part, tree_op, tree_args = args
            tree = self.btrees.get((name, part))
            if tree is None:
                raise UnknownObject(f"btree {name} partition {part}")
            return tree.handle(tree_op, tree_args)
        if op == "echo":
            return args[0]
        raise ValueError(f"unknown service op {op}")


class CatalogCache:
    """Per-compute-server cache with version-counter revalidation."""

    def __init__(self, cluster: "Cluster"):
        self.cluster = cluster
        self._entries: dict[str, dict] = {}
        self._seen_counter: dict[int, int] = {}
        self._txn_checked: set[int] = set()
        self._lock = threading.Lock()

    def owner_of(self, name: str) -> int:
        return self.cluster.memory_ids[fnv1a_64(name.encode()) % len(self.cluster.memory_ids)]

    def begin_txn(self) -> None:
        self._txn_checked.clear()

    def resolve(self, name: str) -> dict:
        owner = self.owner_of(name)
        with self._lock:
            entry = self._entries.get(name)
            fresh_this_txn = owner in self._txn_checked
        if entry is not None and fresh_this_txn:
            return entry
        counter_addr = RemoteAddr(owner, self.cluster.meta_regions[owner], _CATALOG_COUNTER_OFF)
        current = self.cluster.fabric.read_word(counter_addr)
        with self._lock:
            self._txn_checked.add(owner)
            stale = self._seen_counter.get(owner) != current
            if stale:
                self._seen_counter[owner] = current
                for n in [n for n in self._entries if self.owner_of(n) == owner]:
                    del self._entries[n]
            entry = self._entries.get(name)
        if entry is not None:
            return entry
        fetched = self.cluster.fabric.request(owner, ("catalog_get", name))
        with self._lock:
            self._entries[name] = fetched
        return fetched


class Outcome(NamedTuple):
    committed: bool
    attempts: int
    reason: str | None
    phases: dict[str, float]
    cts: tuple[int, int] | None = None


def _table_meta(entry: dict) -> HashTableMeta:
    return HashTableMeta(
        name=entry["name"],
        n_buckets=entry["n_buckets"],
        servers=tuple(entry["servers"]),
        heap_regions=tuple(entry["heap_regions"]),
        bucket_offs=tuple(entry["bucket_offs"]),
        chain_capacities=tuple(entry["chain_capacities"]),
        shard_offs=tuple(entry["shard_offs"]),
        shard_capacities=tuple(entry["shard_capacities"]),
        layout=RecordLayout(entry["payload_len"], entry["buffer_slots"]),
    )


class TxnOps:
    """Facade handed to statement programs; records read- and write-sets."""

    def __init__(self, thread: "ExecThread", rts: tuple[int, ...]):
        self.thread = thread
        self.rts = rts
        self.read_set: dict[tuple[str, int], tuple] = {}  # (table,key) -> (addr, cur_word, found|None)
        self.writes: list[tuple] = []  # ("update"|"insert"|"delete", table, key, payload)
        self.aux: list[tuple] = []     # deferred index maintenance, applied at install

    # -- reads --

    def read(self, table: str, key: int) -> bytes | None:
        thread = self.thread
        meta = thread.table_meta(table)
        ht = HashTable(thread.fx, meta)
        record = f"{table}:{key}"
        try:
            addr = ht.get(key)
        except KeyNotFound:
            thread.emit("read", record=record, version=None)
            self.read_set[(table, key)] = (None, 0, None)
            return None
        try:
            cur_word, found = thread.cluster.store_for(thread).find_version_with_current(
                addr, meta.layout, self.rts
            )
        except VersionNotFound:
            thread.emit("read", record=record, version=None)
            self.read_set[(table, key)] = (addr, None, None)
            return None
        self.read_set[(table, key)] = (addr, cur_word, found)
        thread.emit("read", record=record, version=(found.header.thread_id, found.header.counter))
        return found.payload

    def index_lookup(self, index: str, attr: int) -> list[int]:
        meta = self.thread.table_meta(index)
        return SecondaryHashIndex(self.thread.fx, meta).lookup(attr)

    def btree_range(self, name: str, lo: int, hi: int) -> list[tuple[int, int]]:
        entry = self.thread.catalog.resolve(name)
        meta = BTreeMeta(entry["name"], tuple(entry["bounds"]), tuple(entry["servers"]), entry["order"])
        return BPlusTree(self.thread.fx, meta).range(lo, hi)

    # -- writes (deferred to commit) --

    def update(self, table: str, key: int, payload: bytes) -> None:
        got = self.read_set.get((table, key))
        if got is None or got[2] is None:
            raise VersionNotFound(f"update of unread or absent record {table}:{key}")
        self.writes.append(("update", table, key, payload))

    def insert(self, table: str, key: int, payload: bytes) -> None:
        self.writes.append(("insert", table, key, payload))

    def delete(self, table: str, key: int) -> None:
        got = self.read_set.get((table, key))
        if got is None or got[2] is None:
            raise VersionNotFound(f"delete of unread or absent record {table}:{key}")
        old = got[2].payload
        self.writes.append(("delete", table, key, old))

    def index_insert(self, index: str, attr: int, pkey: int) -> None:
        self.aux.append(("hash", index, attr, pkey))

    def btree_insert(self, name: str, key: int, pkey: int) -> None:
        self.aux.append(("btree", name, key, pkey))


class ExecThread:
    """One transaction execution thread; owns one oracle slot (or a share of
    its compute server's compressed slot) and its private journal."""

    def __init__(self, cluster: "Cluster", compute: "ComputeServer", slot: int, label: str,
                 uid: int = 0):
        self.cluster = cluster
        self.compute = compute
        self.slot = slot       # header/oracle identity (shared under compression)
        self.uid = uid         # unique event-stream identity
        self.label = label
        self.fx = compute.fx
        self.catalog = compute.catalog
        self.writer = None  # set by cluster: ThreadSlotWriter | GroupSlotWriter | None (naive)
        self.journal: recovery.JournalWriter | None = None
        self.txn_seq = 0
        self.pending: CommitTimestamp | None = None
        self.frozen = threading.Event()

    # -- helpers --

    def table_meta(self, table: str) -> HashTableMeta:
        entry = self.catalog.resolve(table)
        if entry["kind"] not in ("table", "hash_index"):
            raise UnknownObject(f"{table} is a {entry['kind']}")
        return _table_meta(entry)

    def emit(self, kind: str, record: str | None = None, version=None, vector=None, deleted: int = 0):
        if self.cluster.events is not None:
            self.cluster.events.emit(self.uid, self.txn_seq, kind, record, version, vector, deleted)

    def _hook(self, phase: str) -> None:
        hook = self.cluster.crash_hook
        if hook is None:
            return
        action = hook(self.slot, self.txn_seq, phase)
        if action == "freeze":
            self.frozen.set()
            threading.Event().wait()  # parks forever; the thread is dead to the world
        elif action == "crash":
            raise SimulatedCrash(f"{self.label} crashed at {phase} (txn {self.txn_seq})")

    def snapshot(self) -> tuple[int, ...]:
        if self.cluster.naive is not None:
            return (self.cluster.naive.get_rts(),)
        if self.compute.prefetch is not None:
            return self.compute.prefetch.consume()
        return self.cluster.vector.read_vector()

    def next_commit(self, rts: tuple[int, ...]) -> CommitTimestamp:
        if self.pending is not None:
            raise StalePending(f"{self.label} has unpublished cts {self.pending}")
        if self.cluster.naive is not None:
            cts = CommitTimestamp(0, self.cluster.naive.get_cts(rts_hint=rts[0]))
        else:
            cts = self.writer.next_commit()
        self.pending = cts
        return cts

    def publish(self, cts: CommitTimestamp, committed: bool) -> None:
        if self.cluster.naive is not None:
            self.cluster.naive.report(cts.counter, committed)
        else:
            self.writer.publish(cts)
        self.pending = None

    def abandon_pending(self) -> None:
        """Infrastructure failure: drop the unpublished cts; recovery rebuilds slots."""
        if self.pending is not None and self.cluster.naive is None:
            if isinstance(self.writer, ThreadSlotWriter):
                self.writer.pending = False
        self.pending = None

    # -- the protocol --

    def execute(self, stmt_id: int, params, retry_cap: int | None = None) -> Outcome:
        cap = self.cluster.config.retry_cap if retry_cap is None else retry_cap
        attempts = 0
        while True:
            attempts += 1
            try:
                phases, cts = self._attempt(stmt_id, params)
                return Outcome(True, attempts, None, phases, cts)
            except (Conflict, BufferStall, VersionGarbageCollected) as exc:
                if attempts > cap:
                    return Outcome(False, attempts, exc.reason, {})
                continue  # immediate retry by the same thread
            except ServerUnavailable as exc:
                self.abandon_pending()
                self.cluster.halted = True
                return Outcome(False, attempts, Infrastructure(str(exc)).reason, {})
            except TransactionAbort as exc:
                return Outcome(False, attempts, exc.reason, {})

    def _attempt(self, stmt_id: int, params) -> tuple[dict[str, float], tuple[int, int]]:
        store = self.cluster.store_for(self)
        self.txn_seq += 1
        self.catalog.begin_txn()
        phases: dict[str, float] = {}
        t0 = time.perf_counter()

        rts = self.snapshot()
        self.emit("begin", vector=rts)
        self._hook("after_begin")
        t1 = time.perf_counter()
        phases["timestamp"] = t1 - t0

        if self.journal is not None:
            self.journal.append(rts, stmt_id, params)
        ops = TxnOps(self, rts)
        try:
            self.cluster.statements[stmt_id](ops, params)
        except TransactionAbort:
            self.emit("abort")
            raise
        self._hook("after_read")
        t2 = time.perf_counter()
        phases["read_set"] = t2 - t1

        cts = self.next_commit(rts)
        self._hook("after_cts")
        try:
            return self._commit_phase(ops, rts, cts, phases, t2)
        except TransactionAbort:
            # every allocated commit counter is published, commit or abort,
            # so the thread's slot sequence never has holes
            if self.pending is not None:
                self.publish(cts, committed=False)
                self.emit("abort")
            raise

    def _commit_phase(self, ops: TxnOps, rts, cts: CommitTimestamp, phases, t2):
        store = self.cluster.store_for(self)
        # collapse repeated writes to one record: one lock, one install,
        # last payload wins (kept in first-write order)
        collapsed: dict[tuple[str, int], tuple] = {}
        for w in ops.writes:
            if w[0] in ("update", "delete"):
                collapsed[(w[1], w[2])] = w
        updates = [(w, self.read_set_entry(ops, w)) for w in collapsed.values()]
        inserts = [w for w in ops.writes if w[0] == "insert"]

        if self.journal is not None and updates:
            intent = [[pack_addr(entry[0]), entry[1]] for _, entry in updates]
            self.journal.append(rts, STMT_LOCK_INTENT, intent)

        locked: list[tuple[RemoteAddr, int]] = []
        claims: list[tuple] = []
        all_ok = True
        witnessed = None
        for (kind, table, key, payload), (addr, cur_word, found) in updates:
            ok = False
            if cur_word is not None and not (cur_word & LOCKED_BIT):
                cur = header_decode(cur_word)
                if (cur.thread_id, cur.counter) == (found.header.thread_id, found.header.counter):
                    try:
                        store.lock(addr, cur_word)
                        locked.append((addr, cur_word))
                        ok = True
                    except VersionChanged as exc:
                        witnessed = exc.witnessed
            self.emit("lock", record=f"{table}:{key}", version=(cts.thread_id, cts.counter))
            all_ok = all_ok and ok
        fatal = None
        if all_ok:
            for kind, table, key, payload in inserts:
                try:
                    claims.append(self._claim_insert(table, key))
                except DuplicateKey:
                    all_ok = False
                    break
                except OutOfMemory as exc:
                    all_ok = False
                    fatal = exc
                    break
        self._hook("after_lock")
        t3 = time.perf_counter()
        phases["verify_lock"] = t3 - t2

        if not all_ok:
            for addr, original in locked:
                store.unlock(addr, original)
            for claim in claims:
                self._rollback_claim(claim)
            self.publish(cts, committed=False)
            self.emit("abort")
            if fatal is not None:
                self.cluster.halted = True
                raise Infrastructure(str(fatal))
            raise VersionChanged(witnessed if witnessed is not None else 0)

        try:
            slot_infos = {
                id(entry): store.wait_install_slot(entry[0], self.table_meta(w[1]).layout)
                for w, entry in updates
            }
        except BufferStall:
            for addr, original in locked:
                store.unlock(addr, original)
            for claim in claims:
                self._rollback_claim(claim)
            self.publish(cts, committed=False)
            self.emit("abort")
            raise

        if self.journal is not None:
            self.journal.append(rts, STMT_COMMIT, [cts.thread_id, cts.counter])
        self._hook("after_log_commit")

        first = True
        for (kind, table, key, payload), entry in updates:
            addr, cur_word, _ = entry
            layout = self.table_meta(table).layout
            store.complete_install(
                addr, layout, cur_word, payload, cts,
                deleted=(kind == "delete"), slot_info=slot_infos[id(entry)],
            )
            self.emit("install", record=f"{table}:{key}",
                      version=(cts.thread_id, cts.counter), deleted=1 if kind == "delete" else 0)
            if first:
                self._hook("mid_install")
                first = False
        for claim, (kind, table, key, payload) in zip(claims, inserts):
            self._finish_insert(claim, payload, cts)
            self.emit("install", record=f"{table}:{key}", version=(cts.thread_id, cts.counter))
        for aux in ops.aux:
            self._apply_aux(aux)
        self._hook("after_install")

        self.publish(cts, committed=True)
        self.emit("publish", version=(cts.thread_id, cts.counter))
        self._hook("after_publish")
        phases["install"] = time.perf_counter() - t3
        return phases, (cts.thread_id, cts.counter)

    @staticmethod
    def read_set_entry(ops: TxnOps, write) -> tuple:
        entry = ops.read_set[(write[1], write[2])]
        if entry[0] is None:
            raise VersionNotFound(f"write to unresolved record {write[1]}:{write[2]}")
        return entry

    # -- inserts --

    def _claim_insert(self, table: str, key: int):
        meta = self.table_meta(table)
        ht = HashTable(self.fx, meta)
        bucket_addr, slot_idx = self._claim_bucket_slot(ht, key)
        return (table, key, ht, bucket_addr, slot_idx)

    def _claim_bucket_slot(self, ht: HashTable, key: int):
        addr = ht.meta.bucket_addr(key)
        si = ht.meta.server_index_of(key)
        while True:
            raw = self.fx.read(addr, BUCKET_SIZE)
            pairs, cont = _parse_bucket_raw(raw)
            if any(k == key for k, _ in pairs):
                raise DuplicateKey(f"{ht.meta.name}: key {key}")
            claimed = None
            for i, (k, _) in enumerate(pairs):
                if k in (0, TOMBSTONE_KEY):
                    won = self.fx.compare_and_swap(addr.shifted(16 * i), k, key)
                    if won == k:
                        claimed = i
                        break
                    if won == key:
                        raise DuplicateKey(f"{ht.meta.name}: key {key}")
                    break
            if claimed is not None:
                return addr, claimed
            if any(k in (0, TOMBSTONE_KEY) for k, _ in pairs):
                continue
            if cont:
                addr = unpack_addr(cont)
                continue
            addr = ht._extend_chain(addr, si)

    def _rollback_claim(self, claim) -> None:
        table, key, ht, bucket_addr, slot_idx = claim
        self.fx.compare_and_swap(bucket_addr.shifted(16 * slot_idx), key, TOMBSTONE_KEY)

    def _finish_insert(self, claim, payload: bytes, cts: CommitTimestamp) -> None:
        table, key, ht, bucket_addr, slot_idx = claim
        record_addr = ht.allocate_record(key)
        self.cluster.store_for(self).create_record(record_addr, ht.meta.layout, payload, cts)
        self.fx.write_word(bucket_addr.shifted(16 * slot_idx + 8), pack_addr(record_addr))

    def _apply_aux(self, aux) -> None:
        if aux[0] == "hash":
            _, index, attr, pkey = aux
            SecondaryHashIndex(self.fx, self.table_meta(index)).insert(attr, pkey)
        elif aux[0] == "btree":
            _, name, key, pkey = aux
            entry = self.catalog.resolve(name)
            meta = BTreeMeta(entry["name"], tuple(entry["bounds"]), tuple(entry["servers"]), entry["order"])
            BPlusTree(self.fx, meta).insert(key, pkey)


def _parse_bucket_raw(raw: bytes):
    pairs = []
    for i in range(CHAIN_SLOTS):
        k = int.from_bytes(raw[16 * i: 16 * i + 8], "little")
        v = int.from_bytes(raw[16 * i + 8: 16 * i + 16], "little")
        pairs.append((k, v))
    return pairs, int.from_bytes(raw[16 * CHAIN_SLOTS: 16 * CHAIN_SLOTS + 8], "little")


class ComputeServer:
    def __init__(self, cluster: "Cluster", index: int, co_located: int | None):
        self.cluster = cluster
        self.index = index
        self.co_located = co_located
        self.fx = LocalityFabric(cluster.fabric, co_located)
        self.catalog = CatalogCache(cluster)
        self.prefetch: PrefetchedVector | None = None
        self.threads: list[ExecThread] = []
        self.heartbeat: recovery.Heartbeat | None = None
        self.monitor: recovery.Monitor | None = None


class Cluster:
    """Builds and owns the whole desk-scale system."""

    LOADER_TXN = 0

    def __init__(self, config: ClusterConfig):
        self.config = config
        self.fabric = Fabric(config.latency)
        self.halted = False
        self.crash_hook: Callable[[int, int, str], str | None] | None = None
        self.events: EventLog | None = (
            EventLog(config.event_capacity) if config.capture_events else None
        )
        self.statements: dict[int, Callable] = {}

        self.memory_ids = list(range(config.memory_servers))
        self.memories: dict[int, ServerMemory] = {}
        self.meta_regions: dict[int, int] = {}
        self.catalog_services: dict[int, CatalogService] = {}
        for sid in self.memory_ids:
            server = self.fabric.add_server(sid)
            self.memories[sid] = ServerMemory(server, config.heap_size, config.overflow_size)
            self.meta_regions[sid] = server.register_region(4096)
            svc = CatalogService(self, sid)
            self.catalog_services[sid] = svc
            server.register_handler(svc.handle)

        # oracle
        self._started = False
        self.naive: NaiveOracle | None = None
        self.vector: VectorOracle | None = None
        self._build_oracle()

        # movers and GC
        self.movers = [VersionMover(m, config.mover_period) for m in self.memories.values()]
        self.gc_snapshots = GcSnapshotList(config.gc_max_exec_time)
        self.collectors = (
            [GarbageCollector(m, self.gc_snapshots, period=min(0.05, config.gc_interval))
             for m in self.memories.values()]
            if config.gc_enabled else []
        )
        self._gc_capture_stop = threading.Event()
        self._gc_capture_thread: threading.Thread | None = None

        # compute servers and exec threads
        self.computes: list[ComputeServer] = []
        self.threads: list[ExecThread] = []
        for c in range(config.compute_servers):
            co = self.memory_ids[c % len(self.memory_ids)] if config.locality else None
            compute = ComputeServer(self, c, co)
            for t in range(config.threads_per_server):
                uid = c * config.threads_per_server + t
                thread = ExecThread(self, compute, 0, f"c{c}t{t}", uid=uid)
                compute.threads.append(thread)
                self.threads.append(thread)
            self.computes.append(compute)
        self._assign_oracle_roles()

        # journals (region per thread per replica, registered deterministically)
        self.journal_regions: dict[str, list[tuple[int, int]]] = {}
        replicas = self.memory_ids[: config.log_replicas]
        for thread in self.threads:
            targets = []
            for sid in replicas:
                rid = self.fabric.server(sid).register_region(config.journal_size)
                targets.append((sid, rid))
            self.journal_regions[thread.label] = targets
            thread.journal = recovery.JournalWriter(self.fabric, targets)

        # heartbeats + monitors (ring)
        if config.monitoring and config.compute_servers > 1:
            hb_region = self.meta_regions[self.memory_ids[0]]
            for c, compute in enumerate(self.computes):
                addr = RemoteAddr(self.memory_ids[0], hb_region, _HEARTBEAT_BASE + 8 * c)
                compute.heartbeat = recovery.Heartbeat(self.fabric, addr, config.heartbeat_period)
            for c, compute in enumerate(self.computes):
                peer = self.computes[(c + 1) % len(self.computes)]
                peer_addr = RemoteAddr(
                    self.memory_ids[0], self.meta_regions[self.memory_ids[0]],
                    _HEARTBEAT_BASE + 8 * peer.index,
                )
                compute.monitor = recovery.Monitor(
                    self, peer.index, peer_addr,
                    period=config.heartbeat_period, misses=config.heartbeat_misses,
                )

        self._store = RecordStore(self.fabric, config.stall_timeout)
        self._local_stores: dict[int, RecordStore] = {}

    # -- plumbing --

    def _build_oracle(self) -> None:
        opts = self.config.oracle
        opts.validate(self.config.memory_servers)
        self.naive = None
        self.vector = None
        if opts.mode == "naive":
            self.naive = NaiveOracle(self.fabric, self.memory_ids[0])
        else:
            base_slots = (
                self.config.compute_servers if opts.compress else self.config.total_threads
            )
            self.n_slots = base_slots + 1  # extra slot for the bulk loader
            self.loader_slot = base_slots
            partition_servers = self.memory_ids[: opts.partitions]
            self.vector = VectorOracle(self.fabric, partition_servers, self.n_slots)

    def _assign_oracle_roles(self) -> None:
        opts = self.config.oracle
        for compute in self.computes:
            compute.prefetch = (
                PrefetchedVector(self.vector, opts.fetch_period, opts.consume_per_slot)
                if self.vector is not None and opts.fetch_thread else None
            )
            for t, thread in enumerate(compute.threads):
                slot = compute.index if opts.compress \
                    else compute.index * self.config.threads_per_server + t
                thread.slot = slot
                if self.vector is not None:
                    thread.writer = (
                        self.vector.group_writer(slot) if opts.compress
                        else self.vector.thread_writer(slot)
                    )
                else:
                    thread.writer = None

    def configure_oracle(self, *, compress: bool | None = None, partitions: int | None = None,
                         fetch_thread: bool | None = None, fetch_period: float | None = None,
                         consume_per_slot: float | None = None) -> None:
        """Change oracle optimizations before any transaction runs. The old
        oracle's regions are abandoned; slot assignments are rebuilt."""
        if self._started:
            raise ConfigFrozen("oracle options are frozen once the cluster started")
        opts = self.config.oracle
        candidate = dataclasses.replace(
            opts,
            compress=opts.compress if compress is None else compress,
            partitions=opts.partitions if partitions is None else partitions,
            fetch_thread=opts.fetch_thread if fetch_thread is None else fetch_thread,
            fetch_period=opts.fetch_period if fetch_period is None else fetch_period,
            consume_per_slot=(
                opts.consume_per_slot if consume_per_slot is None else consume_per_slot
            ),
        )
        candidate.validate(self.config.memory_servers)
        self.config.oracle = candidate
        self._build_oracle()
        self._assign_oracle_roles()

    def store_for(self, thread: ExecThread) -> RecordStore:
        co = thread.compute.co_located
        if co is None:
            return self._store
        store = self._local_stores.get(thread.compute.index)
        if store is None:
            store = RecordStore(thread.compute.fx, self.config.stall_timeout)
            self._local_stores[thread.compute.index] = store
        return store

    def register_statement(self, stmt_id: int, fn: Callable) -> None:
        if stmt_id < FIRST_USER_STMT:
            raise ValueError(f"statement ids below {FIRST_USER_STMT} are reserved")
        self.statements[stmt_id] = fn

    def start(self) -> None:
        self._started = True
        for mover in self.movers:
            mover.start()
        for gc in self.collectors:
            gc.start()
        if self.collectors:
            self._gc_capture_stop.clear()
            self._gc_capture_thread = threading.Thread(
                target=self._gc_capture_loop, name="gc-snapshots", daemon=True
            )
            self._gc_capture_thread.start()
        if self.naive is not None:
            self.naive.start_management()
        for compute in self.computes:
            if compute.prefetch is not None:
                compute.prefetch.start()
            if compute.heartbeat is not None:
                compute.heartbeat.start()
            if compute.monitor is not None:
                compute.monitor.start()
        if self.vector is not None:
            self.vector.freeze()

    def stop(self) -> None:
        for compute in self.computes:
            if compute.monitor is not None:
                compute.monitor.stop()
            if compute.heartbeat is not None:
                compute.heartbeat.stop()
            if compute.prefetch is not None:
                compute.prefetch.stop()
        if self.naive is not None:
            self.naive.stop_management()
        for gc in self.collectors:
            gc.stop()
        self._gc_capture_stop.set()
        if self._gc_capture_thread is not None:
            self._gc_capture_thread.join()
            self._gc_capture_thread = None
        for mover in self.movers:
            mover.stop()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def _gc_capture_loop(self) -> None:
        while not self._gc_capture_stop.is_set():
            self.gc_snapshots.capture(self.current_vector())
            self._gc_capture_stop.wait(self.config.gc_interval)

    def current_vector(self) -> tuple[int, ...]:
        if self.naive is not None:
            return (self.naive.get_rts(),)
        return self.vector.read_vector()

    # -- schema --

    def create_table(self, name: str, payload_len: int, expected_records: int,
                     buffer_slots: int | None = None,
                     servers: list[int] | None = None) -> HashTableMeta:
        k = buffer_slots if buffer_slots is not None else self.config.buffer_slots
        layout = RecordLayout(payload_len, k)
        placement = list(servers) if servers is not None else list(self.memory_ids)
        m = len(placement)
        n_buckets = max(4 * m, (expected_records + 3) // 4)
        entry = {
            "kind": "table", "name": name, "n_buckets": n_buckets,
            "servers": placement,
            "heap_regions": [self.memories[s].heap_region for s in placement],
            "bucket_offs": [], "chain_capacities": [],
            "shard_offs": [], "shard_capacities": [],
            "payload_len": payload_len, "buffer_slots": k,
        }
        for si, sid in enumerate(placement):
            local_buckets = (si + 1) * n_buckets // m - si * n_buckets // m
            chain_cap = max(BUCKET_SIZE * 8, local_buckets * BUCKET_SIZE // 2)
            bucket_size = local_buckets * BUCKET_SIZE + WORD + chain_cap
            bucket_off = self.fabric.request(sid, ("extend_alloc", bucket_size, expected_records))
            per_server = expected_records // m + 1
            shard_cap = 2 * WORD + layout.block_size * (2 * per_server + 64)
            shard_off = self.fabric.request(sid, ("extend_alloc", shard_cap, expected_records))
            self.fabric.request(sid, ("shard_add", shard_off, shard_cap, payload_len, k))
            entry["bucket_offs"].append(bucket_off)
            entry["chain_capacities"].append(chain_cap)
            entry["shard_offs"].append(shard_off)
            entry["shard_capacities"].append(shard_cap)
        owner = self.catalog_services[self.memory_ids[fnv1a_64(name.encode()) % len(self.memory_ids)]]
        self.fabric.request(owner.server_id, ("catalog_put", name, entry))
        return _table_meta(entry)

    def create_hash_index(self, name: str, expected_entries: int) -> HashTableMeta:
        m = len(self.memory_ids)
        n_buckets = max(4 * m, (expected_entries + 3) // 4)
        entry = {
            "kind": "hash_index", "name": name, "n_buckets": n_buckets,
            "servers": list(self.memory_ids),
            "heap_regions": [self.memories[s].heap_region for s in self.memory_ids],
            "bucket_offs": [], "chain_capacities": [],
            "shard_offs": [0] * m, "shard_capacities": [0] * m,
            "payload_len": 0, "buffer_slots": 1,
        }
        for si, sid in enumerate(self.memory_ids):
            local_buckets = (si + 1) * n_buckets // m - si * n_buckets // m
            chain_cap = max(BUCKET_SIZE * 8, local_buckets * BUCKET_SIZE)
            size = local_buckets * BUCKET_SIZE + WORD + chain_cap
            off = self.fabric.request(sid, ("extend_alloc", size, expected_entries))
            entry["bucket_offs"].append(off)
            entry["chain_capacities"].append(chain_cap)
        owner = self.catalog_services[self.memory_ids[fnv1a_64(name.encode()) % m]]
        self.fabric.request(owner.server_id, ("catalog_put", name, entry))
        return _table_meta(entry)

    def create_btree(self, name: str, lo: int, hi: int, order: int = 64) -> BTreeMeta:
        meta = BTreeMeta.split_range(name, lo, hi, tuple(self.memory_ids), order)
        for part, sid in enumerate(meta.servers):
            self.fabric.request(sid, ("btree_create", name, part, order))
        entry = {"kind": "btree", "name": name, "bounds": list(meta.bounds),
                 "servers": list(meta.servers), "order": order}
        owner = self.catalog_services[self.memory_ids[fnv1a_64(name.encode()) % len(self.memory_ids)]]
        self.fabric.request(owner.server_id, ("catalog_put", name, entry))
        return meta

    # -- bulk load (outside transactions; stamped with the loader's slot) --

    def loader_cts_value(self) -> CommitTimestamp:
        if self.naive is not None:
            if getattr(self, "_naive_load_cts", None) is None:
                self._naive_load_cts = self.naive.get_cts()
            return CommitTimestamp(0, self._naive_load_cts)
        return CommitTimestamp(self.loader_slot, 1)

    def begin_load(self) -> None:
        if self.events is not None:
            self.events.emit(-1, self.LOADER_TXN, "begin", vector=self.current_vector())

    def bulk_put(self, meta: HashTableMeta, key: int, payload: bytes) -> RemoteAddr:
        cts = self.loader_cts_value()
        ht = HashTable(self.fabric, meta)
        addr = ht.allocate_record(key)
        self._store.create_record(addr, meta.layout, payload, cts)
        ht.put(key, addr)
        if self.events is not None:
            self.events.emit(-1, self.LOADER_TXN, "install",
                             record=f"{meta.name}:{key}", version=(cts.thread_id, cts.counter))
        return addr

    def finish_load(self) -> None:
        cts = self.loader_cts_value()
        if self.naive is not None:
            self.naive.report(cts.counter, True)
            self.naive.advance()
        else:
            self.fabric.write_word(self.vector.slot_addr(self.loader_slot), cts.counter)
        if self.events is not None:
            self.events.emit(-1, self.LOADER_TXN, "publish", version=(cts.thread_id, cts.counter))

    # -- state inspection --

    def table_items(self, meta: HashTableMeta) -> list[tuple[int, RemoteAddr]]:
        """All (key, record addr) pairs, bucket order, via local access."""
        out = []
        for si, sid in enumerate(meta.servers):
            server = self.fabric.server(sid)
            first = meta.first_bucket(si)
            for b in range(meta.buckets_on(si)):
                off = meta.bucket_offs[si] + b * BUCKET_SIZE
                raw = server.local_read(meta.heap_regions[si], off, BUCKET_SIZE)
                pairs, cont = _parse_bucket_raw(raw)
                while True:
                    for k, v in pairs:
                        if k not in (0, TOMBSTONE_KEY) and v != 0:
                            out.append((k, unpack_addr(v)))
                    if not cont:
                        break
                    cont_addr = unpack_addr(cont)
                    raw = server.local_read(cont_addr.region_id, cont_addr.offset, BUCKET_SIZE)
                    pairs, cont = _parse_bucket_raw(raw)
        return out

    def state_hash(self) -> str:
        """Digest of every table's newest visible record state plus the vector.

        Old-version buffers and overflow are caches and excluded; addresses are
        excluded so recovered state hashes equal the reference run's.
        """
        vec = self.current_vector()
        h = hashlib.sha256()
        h.update(repr(vec).encode())
        names = sorted(
            n for svc in self.catalog_services.values()
            for n, e in svc.objects.items() if e["kind"] == "table"
        )
        for name in names:
            svc = self.catalog_services[self.memory_ids[fnv1a_64(name.encode()) % len(self.memory_ids)]]
            meta = _table_meta(svc.objects[name])
            h.update(name.encode())
            for key, addr in sorted(self.table_items(meta)):
                try:
                    _, found = self._store.find_version_with_current(addr, meta.layout, vec)
                except (VersionNotFound, VersionGarbageCollected):
                    continue
                hdr = found.header
                h.update(
                    b"%d|%d|%d|%d|" % (key, hdr.thread_id, hdr.counter, hdr.deleted) + found.payload
                )
        return h.hexdigest()

    # -- failure simulation --

    def kill_compute(self, index: int) -> None:
        """Stop a compute server's heartbeat; its frozen threads keep their locks."""
        compute = self.computes[index]
        if compute.heartbeat is not None:
            compute.heartbeat.stop()
        if compute.prefetch is not None:
            compute.prefetch.stop()

    def simulate_memory_crash(self) -> None:
        """Lose all memory-server state except journal regions (>=2 replicas),
        as a memory-server failure followed by a system halt would. Background
        threads must already be stopped."""
        self.halted = True
        keep: dict[int, set[int]] = {sid: set() for sid in self.memory_ids}
        for targets in self.journal_regions.values():
            for sid, rid in targets:
                keep[sid].add(rid)
        for sid in self.memory_ids:
            server = self.fabric.server(sid)
            for rid in server.region_ids():
                if rid not in keep[sid]:
                    region = server.region(rid)
                    with region.lock:
                        region.data[:] = bytes(region.length)
        for memory in self.memories.values():
            memory.reset()
        for svc in self.catalog_services.values():
            svc.objects.clear()
            svc.btrees.clear()
        for compute in self.computes:
            compute.catalog = CatalogCache(self)
            for thread in compute.threads:
                thread.catalog = compute.catalog
                thread.pending = None
        if self.naive is not None:
            # commit counters restart at 1; recovery for the naive oracle is
            # not supported beyond a clean reload
            server = self.fabric.server(self.naive.server_id)
            server.local_write_word(self.naive.region, 8, 1)

    # -- recovery hooks (driven by recovery.recover) --

    def restore_schema(self, catalog: dict[str, dict]) -> None:
        """Recreate catalog objects and server-side structures exactly as the
        checkpointed entries describe them (same extents, same regions)."""
        for name in sorted(catalog):
            entry = catalog[name]
            owner = self.catalog_services[self.memory_ids[fnv1a_64(name.encode()) % len(self.memory_ids)]]
            if entry["kind"] in ("table", "hash_index"):
                for si, sid in enumerate(entry["servers"]):
                    memory = self.memories[sid]
                    local_buckets = (si + 1) * entry["n_buckets"] // len(entry["servers"]) \
                        - si * entry["n_buckets"] // len(entry["servers"])
                    bucket_size = local_buckets * BUCKET_SIZE + WORD + entry["chain_capacities"][si]
                    memory.reserve_extend(entry["bucket_offs"][si], bucket_size)
                    if entry["kind"] == "table":
                        memory.reserve_extend(entry["shard_offs"][si], entry["shard_capacities"][si])
                        memory.add_shard(
                            entry["shard_offs"][si], entry["shard_capacities"][si],
                            RecordLayout(entry["payload_len"], entry["buffer_slots"]),
                        )
            elif entry["kind"] == "btree":
                for part, sid in enumerate(entry["servers"]):
                    self.fabric.request(sid, ("btree_create", name, part, entry["order"]))
            self.fabric.request(owner.server_id, ("catalog_put", name, entry))

    def apply_statement(self, thread: ExecThread, rts, stmt_id: int, params,
                        cts: CommitTimestamp) -> None:
        """Deterministic single-threaded re-execution with a forced snapshot
        and commit timestamp (recovery replay). No journaling, no retry."""
        thread.txn_seq += 1
        thread.catalog.begin_txn()
        ops = TxnOps(thread, tuple(rts))
        thread.emit("begin", vector=tuple(rts))
        self.statements[stmt_id](ops, params)
        store = self.store_for(thread)
        for w in ops.writes:
            kind, table, key, payload = w
            layout = thread.table_meta(table).layout
            if kind == "insert":
                claim = thread._claim_insert(table, key)
                thread._finish_insert(claim, payload, cts)
            else:
                addr, cur_word, _ = thread.read_set_entry(ops, w)
                store.lock(addr, cur_word)
                store.complete_install(addr, layout, cur_word, payload, cts,
                                       deleted=(kind == "delete"))
            thread.emit("install", record=f"{table}:{key}",
                        version=(cts.thread_id, cts.counter),
                        deleted=1 if kind == "delete" else 0)
        for aux in ops.aux:
            thread._apply_aux(aux)
        if self.vector is not None:
            self.fabric.write_word(self.vector.slot_addr(cts.thread_id), cts.counter)
        else:
            self.naive.report(cts.counter, True)
        thread.emit("publish", version=(cts.thread_id, cts.counter))

    def set_published(self, published: dict[int, int]) -> None:
        """Align slot words and local writer state after recovery replay."""
        if self.vector is None:
            return
        for slot, value in published.items():
            self.fabric.write_word(self.vector.slot_addr(slot), value)
        for thread in self.threads:
            w = thread.writer
            if isinstance(w, ThreadSlotWriter):
                w.local_t = published.get(w.slot, 0)
                w.pending = False
            elif w is not None:
                value = published.get(w.slot, 0)
                with w._lock:
                    w._counter = value
                    w._published = value
                    w._dirty = value
                    w._flushed = value
                    w._flushing = False


def default_cluster(config: ClusterConfig | None = None) -> Cluster:
    return Cluster(config or ClusterConfig())
