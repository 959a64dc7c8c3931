"""Logging, checkpointing, recovery replay, and compute-server monitoring.

Each execution thread writes a private journal to >=2 memory servers with
one-sided writes. Entries are <T, S>: the read-snapshot vector plus a
statement id and its parameters. Per transaction the journal carries a
statement entry (logged at begin), a lock-intent entry (record addresses and
observed headers, logged before the CAS phase so a monitor can identify
abandoned locks), and a commit entry whose parameters are the commit
timestamp - always appended before any write-set install.

Journal region layout (little-endian):
    word 0: total bytes of entries
    from byte 8: [u32 entry_len][u16 vec_len][vec_len x u64][u16 stmt_id][param blob]
Parameters are canonical JSON.

Recovery after a memory-server failure halts everything, restores all
servers from the last checkpoint, merges the per-thread journals (ordered by
read-timestamp vector sum, which linearizes every read-from dependency), and
re-executes committed statements deterministically under their logged
snapshots, reusing the logged commit timestamps. Statements whose commit
counter is already covered by a slot's published value are skipped, which is
what makes replay idempotent and lets checkpoints truncate the log.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import time
from typing import NamedTuple

from .errors import ReplayError, ServerUnavailable
from .fabric import Fabric, RemoteAddr, unpack_addr
from .memstore import LOCKED_BIT

STMT_LOCK_INTENT = 0
STMT_COMMIT = 1

_LEN = struct.Struct("<I")
_U16 = struct.Struct("<H")
CHECKPOINT_MAGIC = b"FDBC\x01"


class JournalEntry(NamedTuple):
    vector: tuple[int, ...]
    stmt_id: int
    params: object
    pos: int


def encode_entry(vector: tuple[int, ...], stmt_id: int, params) -> bytes:
    blob = json.dumps(params, separators=(",", ":")).encode()
    body = _U16.pack(len(vector))
    body += b"".join(v.to_bytes(8, "little") for v in vector)
    body += _U16.pack(stmt_id) + blob
    return _LEN.pack(len(body)) + body


def decode_entries(raw: bytes) -> list[JournalEntry]:
    out: list[JournalEntry] = []
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise ReplayError("truncated entry length", pos)
        (blen,) = _LEN.unpack_from(raw, pos)
        body = raw[pos + 4: pos + 4 + blen]
        if len(body) != blen:
            raise ReplayError("truncated entry body", pos)
        (vlen,) = _U16.unpack_from(body, 0)
        need = 2 + 8 * vlen + 2
        if blen < need:
            raise ReplayError("entry too short for vector", pos)
        vector = tuple(
            int.from_bytes(body[2 + 8 * i: 10 + 8 * i], "little") for i in range(vlen)
        )
        (stmt_id,) = _U16.unpack_from(body, 2 + 8 * vlen)
        blob = body[2 + 8 * vlen + 2:]
        try:
            params = json.loads(blob) if blob else None
        except json.JSONDecodeError as exc:
            raise ReplayError(f"corrupt parameter blob: {exc}", pos) from exc
        out.append(JournalEntry(vector, stmt_id, params, pos))
        pos += 4 + blen
    return out


class JournalWriter:
    """Appends each entry to every replica region before returning."""

    def __init__(self, fabric: Fabric, targets: list[tuple[int, int]]):
        self.fabric = fabric
        self.targets = targets
        self.off = 0
        self.degraded = False

    def append(self, vector: tuple[int, ...], stmt_id: int, params) -> None:
        frame = encode_entry(vector, stmt_id, params)
        wrote = 0
        for sid, rid in self.targets:
            try:
                self.fabric.write(RemoteAddr(sid, rid, 8 + self.off), frame)
                self.fabric.write_word(RemoteAddr(sid, rid, 0), self.off + len(frame))
                wrote += 1
            except ServerUnavailable:
                self.degraded = True
        if wrote == 0:
            raise ServerUnavailable("all journal replicas unavailable")
        self.off += len(frame)

    def resync(self) -> None:
        """Re-learn the append offset from a surviving replica."""
        for sid, rid in self.targets:
            try:
                self.off = self.fabric.read_word(RemoteAddr(sid, rid, 0))
                return
            except ServerUnavailable:
                continue
        raise ServerUnavailable("no journal replica reachable")


def read_journal(fabric: Fabric, targets: list[tuple[int, int]]) -> list[JournalEntry]:
    last_err: Exception | None = None
    for sid, rid in targets:
        try:
            length = fabric.read_word(RemoteAddr(sid, rid, 0))
            if length == 0:
                return []
            raw = fabric.read(RemoteAddr(sid, rid, 8), length)
            return decode_entries(raw)
        except ServerUnavailable as exc:
            last_err = exc
    raise ServerUnavailable(f"no journal replica reachable: {last_err}")


class CommittedStatement(NamedTuple):
    vector: tuple[int, ...]
    stmt_id: int
    params: object
    slot: int
    counter: int
    thread_label: str
    order: int  # per-thread sequence


def committed_statements(entries: list[JournalEntry], thread_label: str) -> list[CommittedStatement]:
    """Pair statement entries with their commit entries; drop uncommitted."""
    out: list[CommittedStatement] = []
    pending: JournalEntry | None = None
    order = 0
    for e in entries:
        if e.stmt_id == STMT_LOCK_INTENT:
            continue
        if e.stmt_id == STMT_COMMIT:
            if pending is not None:
                slot, counter = e.params
                out.append(CommittedStatement(
                    pending.vector, pending.stmt_id, pending.params,
                    slot, counter, thread_label, order,
                ))
                order += 1
                pending = None
        else:
            pending = e
    return out


def dangling_lock_intents(entries: list[JournalEntry]) -> list[tuple[int, int]]:
    """(packed addr, observed header) pairs locked but never committed."""
    intents: list[tuple[int, int]] = []
    for e in entries:
        if e.stmt_id == STMT_LOCK_INTENT:
            intents = [(int(a), int(w)) for a, w in e.params]
        elif e.stmt_id == STMT_COMMIT:
            intents = []
    return intents


# -- checkpointing --


def write_checkpoint(cluster, path: str, read_ts: tuple[int, ...] | None = None) -> None:
    """Serialize the newest version of every record visible under read_ts,
    plus the full catalog; written atomically (tmp + rename)."""
    from .errors import VersionGarbageCollected, VersionNotFound  # local to avoid cycles

    vec = read_ts if read_ts is not None else cluster.current_vector()
    catalog: dict[str, dict] = {}
    for svc in cluster.catalog_services.values():
        catalog.update(svc.objects)
    header = json.dumps({"vector": list(vec), "catalog": catalog}, sort_keys=True).encode()

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_LEN.pack(len(header)))
        f.write(header)
        for name in sorted(n for n, e in catalog.items() if e["kind"] == "table"):
            from .txn import _table_meta

            meta = _table_meta(catalog[name])
            rows = []
            for key, addr in sorted(cluster.table_items(meta)):
                try:
                    _, found = cluster._store.find_version_with_current(addr, meta.layout, vec)
                except (VersionNotFound, VersionGarbageCollected):
                    continue
                hdr = found.header
                rows.append((key, hdr.thread_id, hdr.counter, hdr.deleted, found.payload))
            nb = name.encode()
            f.write(_U16.pack(len(nb)) + nb + _LEN.pack(len(rows)))
            for key, tid, counter, deleted, payload in rows:
                f.write(key.to_bytes(8, "little"))
                f.write(tid.to_bytes(4, "little") + counter.to_bytes(8, "little"))
                f.write(bytes([deleted]))
                f.write(payload)
    os.replace(tmp, path)


def read_checkpoint(path: str):
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ReplayError("bad checkpoint magic")
        (hlen,) = _LEN.unpack(f.read(4))
        header = json.loads(f.read(hlen))
        vector = tuple(header["vector"])
        catalog = header["catalog"]
        tables: dict[str, list] = {}
        for name in sorted(n for n, e in catalog.items() if e["kind"] == "table"):
            (nlen,) = _U16.unpack(f.read(2))
            fname = f.read(nlen).decode()
            if fname != name:
                raise ReplayError(f"checkpoint table order mismatch: {fname} != {name}")
            (count,) = _LEN.unpack(f.read(4))
            payload_len = catalog[name]["payload_len"]
            rows = []
            for _ in range(count):
                key = int.from_bytes(f.read(8), "little")
                tid = int.from_bytes(f.read(4), "little")
                counter = int.from_bytes(f.read(8), "little")
                deleted = f.read(1)[0]
                payload = f.read(payload_len)
                rows.append((key, tid, counter, deleted, payload))
            tables[name] = rows
        return vector, catalog, tables


# -- recovery --


def recover(cluster, checkpoint_path: str, rebuild_indexes=None) -> dict[int, int]:
    """Restore all memory servers from the checkpoint, replay the merged
    journals, and return the published counter per slot. The cluster must be
    halted and its memory wiped (simulate_memory_crash) first."""
    from .index import HashTable
    from .memstore import RecordLayout
    from .oracle import CommitTimestamp
    from .txn import _table_meta

    vector, catalog, tables = read_checkpoint(checkpoint_path)

    # journals must be read before schema rebuilding touches anything
    per_thread_entries = {
        label: read_journal(cluster.fabric, targets)
        for label, targets in cluster.journal_regions.items()
    }

    cluster.restore_schema(catalog)

    # restore record state with original version identities
    for name, rows in tables.items():
        meta = _table_meta(catalog[name])
        ht = HashTable(cluster.fabric, meta)
        for key, tid, counter, deleted, payload in rows:
            addr = ht.allocate_record(key)
            cluster._store.create_record(
                addr, meta.layout, payload, CommitTimestamp(tid, counter), deleted=bool(deleted)
            )
            ht.put(key, addr)

    # secondary indexes must exist before replay: replayed statements read
    # them (version filtering happens at the table, so the checkpoint-time
    # index contents are what their logged snapshots expect)
    if rebuild_indexes is not None:
        rebuild_indexes(cluster)

    published = {slot: value for slot, value in enumerate(vector)}
    published = replay_entries(cluster, per_thread_entries, published)

    cluster.set_published(published)
    for thread in cluster.threads:
        if thread.journal is not None:
            thread.journal.resync()
        thread.pending = None
    cluster.halted = False
    return published


def replay_entries(cluster, per_thread_entries: dict, published: dict[int, int]) -> dict[int, int]:
    """Replay committed statements above each slot's published watermark.
    Statements merge in read-timestamp order, which linearizes every
    read-from dependency (a reader's vector strictly dominates its writers')."""
    from .oracle import CommitTimestamp

    merged: list[CommittedStatement] = []
    for label, entries in per_thread_entries.items():
        merged.extend(committed_statements(entries, label))
    merged.sort(key=lambda s: (sum(s.vector), s.thread_label, s.order))

    replayer = cluster.threads[0]
    for stmt in merged:
        if stmt.counter <= published.get(stmt.slot, 0):
            continue  # inside the checkpoint or an earlier replay: skip
        cluster.apply_statement(replayer, stmt.vector, stmt.stmt_id, stmt.params,
                                CommitTimestamp(stmt.slot, stmt.counter))
        published[stmt.slot] = stmt.counter
    return published


def replay_journals(cluster) -> dict[int, int]:
    """Re-replay all journals against the live state; watermarks make this a
    no-op for everything already applied (replay idempotence)."""
    per_thread_entries = {
        label: read_journal(cluster.fabric, targets)
        for label, targets in cluster.journal_regions.items()
    }
    vector = cluster.current_vector()
    published = {slot: value for slot, value in enumerate(vector)}
    published = replay_entries(cluster, per_thread_entries, published)
    cluster.set_published(published)
    return published


# -- heartbeats and monitoring --


class Heartbeat:
    """Writes an incrementing counter word through the fabric every period."""

    def __init__(self, fabric: Fabric, addr: RemoteAddr, period: float):
        self.fabric = fabric
        self.addr = addr
        self.period = period
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="heartbeat", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join()
        self._thread = None

    def _run(self) -> None:
        n = 0
        while not self._stop.is_set():
            n += 1
            try:
                self.fabric.write_word(self.addr, n)
            except ServerUnavailable:
                pass
            self._stop.wait(self.period)


class Monitor:
    """Watches one peer compute server's heartbeat; after `misses` unchanged
    reads, treats the peer as dead and releases its abandoned record locks
    using the peer's lock-intent journal entries."""

    def __init__(self, cluster, peer_index: int, peer_addr: RemoteAddr,
                 period: float, misses: int):
        self.cluster = cluster
        self.peer_index = peer_index
        self.peer_addr = peer_addr
        self.period = period
        self.misses = misses
        self.unlocked_count = 0
        self.peer_declared_dead = False
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name=f"monitor-{self.peer_index}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join()
        self._thread = None

    def _run(self) -> None:
        last = None
        unchanged = 0
        while not self._stop.is_set():
            try:
                beat = self.cluster.fabric.read_word(self.peer_addr)
            except ServerUnavailable:
                beat = last
            if beat == last:
                unchanged += 1
            else:
                unchanged = 0
                last = beat
            if unchanged >= self.misses and not self.peer_declared_dead:
                self.handle_peer_failure()
                self.peer_declared_dead = True
            self._stop.wait(self.period)

    def handle_peer_failure(self) -> None:
        # grace: any live lock holder finishes installing within a heartbeat
        time.sleep(self.period)
        peer = self.cluster.computes[self.peer_index]
        for thread in peer.threads:
            targets = self.cluster.journal_regions[thread.label]
            try:
                entries = read_journal(self.cluster.fabric, targets)
            except ServerUnavailable:
                continue
            for packed, observed in dangling_lock_intents(entries):
                addr = unpack_addr(packed)
                locked_word = observed | LOCKED_BIT
                try:
                    cur = self.cluster.fabric.read_word(addr)
                    if cur != locked_word:
                        continue
                    time.sleep(self.period / 2)  # re-check: a live holder would move on
                    won = self.cluster.fabric.compare_and_swap(addr, locked_word, observed)
                    if won == locked_word:
                        self.unlocked_count += 1
                except ServerUnavailable:
                    continue
