"""Memory-server record layout and version management.

Every record lives in a fixed-size block inside its table shard's extend:

    offset 0            current version header (8 bytes)
    offset 8            current payload (padded to 8-byte multiple, P8)
    offset 8+P8         next-write counter (8 bytes)
    offset 16+P8        K old-version headers (8 bytes each)
    offset 16+P8+8K     K old-version payloads (P8 each)
    offset 16+P8+8K+KP8 overflow chain head (packed RemoteAddr or 0)

The newest version is always readable with one verb. The twin circular
buffers (headers, payloads) advance in lockstep through the shared next-write
counter, which sits in front of the header buffer so one verb fetches both.
A version-mover thread copies buffer entries to an append-only overflow
region and then sets their moved bit; an installer may only overwrite a slot
whose moved bit is set (or which is still empty) and otherwise waits briefly
for the mover before giving up with BufferStall.

Overflow entries are [next-ptr u64][header u64][payload P8]; chains run
newest-first. The garbage collector marks overflow entries deleted once a
newer version of their record is visible under the retention snapshot
(the newest oracle-vector snapshot older than the maximal transaction
execution time E), then advances a truncation boundary over contiguous
deleted prefixes of the overflow region.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import NamedTuple

from .errors import (
    BufferStall,
    OutOfMemory,
    VersionChanged,
    VersionGarbageCollected,
    VersionNotFound,
)
from .fabric import Fabric, MemoryServer, RemoteAddr, WORD, pack_addr, unpack_addr
from .oracle import CommitTimestamp, is_visible

LOCKED_BIT = 1
DELETED_BIT = 2
MOVED_BIT = 4

_COUNTER_SHIFT = 3
_THREAD_SHIFT = 35
_COUNTER_MASK = (1 << 32) - 1
_THREAD_MASK = (1 << 29) - 1


class VersionHeader(NamedTuple):
    thread_id: int
    counter: int
    moved: int
    deleted: int
    locked: int

    def timestamp(self) -> CommitTimestamp:
        return CommitTimestamp(self.thread_id, self.counter)


def header_encode(thread_id: int, counter: int, moved: int = 0, deleted: int = 0, locked: int = 0) -> int:
    """Pack header fields into the 8-byte word: thread id high 29 bits,
    commit counter next 32, then moved/deleted/locked flags (locked is bit 0)."""
    if not 0 <= thread_id < 1 << 29:
        raise ValueError(f"thread_id {thread_id} exceeds 29 bits")
    if not 0 <= counter < 1 << 32:
        raise ValueError(f"counter {counter} exceeds 32 bits")
    return (
        (thread_id << _THREAD_SHIFT)
        | (counter << _COUNTER_SHIFT)
        | (MOVED_BIT if moved else 0)
        | (DELETED_BIT if deleted else 0)
        | (LOCKED_BIT if locked else 0)
    )


def header_decode(word: int) -> VersionHeader:
    return VersionHeader(
        (word >> _THREAD_SHIFT) & _THREAD_MASK,
        (word >> _COUNTER_SHIFT) & _COUNTER_MASK,
        1 if word & MOVED_BIT else 0,
        1 if word & DELETED_BIT else 0,
        1 if word & LOCKED_BIT else 0,
    )


def _pad8(n: int) -> int:
    return (n + 7) & ~7


@dataclass(frozen=True)
class RecordLayout:
    payload_len: int
    buffer_slots: int = 16

    @property
    def payload8(self) -> int:
        return _pad8(self.payload_len)

    @property
    def meta_off(self) -> int:
        return 8 + self.payload8

    @property
    def hdr_buf_off(self) -> int:
        return self.meta_off + WORD

    @property
    def data_buf_off(self) -> int:
        return self.hdr_buf_off + WORD * self.buffer_slots

    @property
    def overflow_off(self) -> int:
        return self.data_buf_off + self.payload8 * self.buffer_slots

    @property
    def block_size(self) -> int:
        return self.overflow_off + WORD

    def overflow_entry_size(self) -> int:
        return 2 * WORD + self.payload8


class FoundVersion(NamedTuple):
    header: VersionHeader
    payload: bytes


class RecordStore:
    """Client-side record operations, all through fabric verbs."""

    def __init__(self, fabric: Fabric, stall_timeout: float = 0.001):
        self.fabric = fabric
        self.stall_timeout = stall_timeout

    # -- reads --

    def read_current(self, addr: RemoteAddr, layout: RecordLayout) -> tuple[int, bytes]:
        """One verb: returns (header word, payload bytes); header may be locked."""
        raw = self.fabric.read(addr, 8 + layout.payload_len)
        return int.from_bytes(raw[:WORD], "little"), raw[WORD:]

    def read_buffer_meta(self, addr: RemoteAddr, layout: RecordLayout):
        """One verb: (next_write, buffer header words). Counter is co-located
        with the header buffer exactly so this costs a single read."""
        raw = self.fabric.read(addr.shifted(layout.meta_off), WORD * (1 + layout.buffer_slots))
        next_write = int.from_bytes(raw[:WORD], "little")
        hdrs = [int.from_bytes(raw[8 * i: 8 * i + 8], "little") for i in range(1, 1 + layout.buffer_slots)]
        return next_write, hdrs

    def read_overflow_head(self, addr: RemoteAddr, layout: RecordLayout) -> int:
        return self.fabric.read_word(addr.shifted(layout.overflow_off))

    def find_version(self, addr: RemoteAddr, layout: RecordLayout, slots) -> FoundVersion:
        return self.find_version_with_current(addr, layout, slots)[1]

    def find_version_with_current(
        self, addr: RemoteAddr, layout: RecordLayout, slots
    ) -> tuple[int, FoundVersion]:
        """Newest version visible under the snapshot `slots`, plus the current
        header word as observed (the word a later update must CAS against).

        Search order: current version, then the header buffer newest-to-oldest
        (one meta verb, then at most one payload fetch), then the overflow
        chain. A moved buffer slot may be concurrently reused by an installer,
        so a payload read from a moved slot is validated by re-reading its
        header; on mismatch the version is taken from overflow, where the
        mover is guaranteed to have copied it.
        """
        cur_word, cur_payload = self.read_current(addr, layout)
        if cur_word == 0:
            raise VersionNotFound(f"record {addr} has no installed version")
        cur = header_decode(cur_word)
        if is_visible(cur.timestamp(), slots):
            if cur.deleted:
                raise VersionNotFound(f"record {addr} deleted as of this snapshot")
            return cur_word, FoundVersion(cur._replace(locked=0), cur_payload[:layout.payload_len])

        next_write, hdrs = self.read_buffer_meta(addr, layout)
        k = layout.buffer_slots
        newest = next_write - 1
        oldest = max(0, next_write - k)
        for chrono in range(newest, oldest - 1, -1):
            slot = chrono % k
            word = hdrs[slot]
            if word == 0:
                continue
            v = header_decode(word)
            if not is_visible(v.timestamp(), slots):
                continue
            payload = self.fabric.read(
                addr.shifted(layout.data_buf_off + slot * layout.payload8), layout.payload_len
            )
            if v.moved:
                check = self.fabric.read_word(addr.shifted(layout.hdr_buf_off + slot * WORD))
                if check != word:
                    break  # slot reused under us; the version lives in overflow
            if v.deleted:
                raise VersionNotFound(f"record {addr} deleted as of this snapshot")
            return cur_word, FoundVersion(v, payload)
        return cur_word, self._find_in_overflow(addr, layout, slots)

    def _find_in_overflow(self, addr: RemoteAddr, layout: RecordLayout, slots) -> FoundVersion:
        ptr = self.read_overflow_head(addr, layout)
        while ptr:
            entry_addr = unpack_addr(ptr)
            boundary = self.fabric.read_word(RemoteAddr(entry_addr.server_id, entry_addr.region_id, 8))
            if entry_addr.offset < boundary:
                raise VersionGarbageCollected(f"record {addr}: overflow truncated")
            raw = self.fabric.read(entry_addr, layout.overflow_entry_size())
            nxt = int.from_bytes(raw[:WORD], "little")
            v = header_decode(int.from_bytes(raw[WORD:2 * WORD], "little"))
            if v.deleted:
                raise VersionGarbageCollected(f"record {addr}: version garbage collected")
            if is_visible(v.timestamp(), slots):
                return FoundVersion(v, raw[2 * WORD: 2 * WORD + layout.payload_len])
            ptr = nxt
        raise VersionNotFound(f"record {addr}: no version visible under snapshot")

    # -- writes --

    def lock(self, addr: RemoteAddr, observed_word: int) -> int:
        """Combined validation + lock: CAS observed (unlocked) -> observed|locked.
        Returns the locked word; raises VersionChanged with the witnessed word."""
        if observed_word & LOCKED_BIT:
            raise ValueError("observed header must be unlocked")
        locked = observed_word | LOCKED_BIT
        witnessed = self.fabric.compare_and_swap(addr, observed_word, locked)
        if witnessed != observed_word:
            raise VersionChanged(witnessed)
        return locked

    def unlock(self, addr: RemoteAddr, original_word: int) -> None:
        """Restore the pre-lock header with one write."""
        self.fabric.write_word(addr, original_word & ~LOCKED_BIT)

    def wait_install_slot(self, addr: RemoteAddr, layout: RecordLayout) -> tuple[int, int]:
        """Wait (bounded) until the buffer slot at next_write is overwritable,
        i.e. empty or already moved to overflow. Requires the record lock to
        be held, which freezes next_write. Returns (next_write, slot); raises
        BufferStall if the mover has not caught up in time."""
        k = layout.buffer_slots
        deadline = time.monotonic() + self.stall_timeout
        while True:
            next_write, hdrs = self.read_buffer_meta(addr, layout)
            slot = next_write % k
            if hdrs[slot] == 0 or hdrs[slot] & MOVED_BIT:
                return next_write, slot
            if time.monotonic() >= deadline:
                raise BufferStall(f"record {addr}: slot {slot} not moved")
            time.sleep(0.0002)

    def complete_install(
        self,
        addr: RemoteAddr,
        layout: RecordLayout,
        observed_word: int,
        new_payload: bytes,
        cts: CommitTimestamp,
        deleted: bool = False,
        slot_info: tuple[int, int] | None = None,
    ) -> None:
        """Finish an install after lock() succeeded: copy the current version
        into the buffer slot at next_write, bump the counter, then overwrite
        the current version (header + payload, lock cleared) in one write.

        slot_info (from wait_install_slot) lets the engine pre-check slot
        availability before it logs the commit entry, so BufferStall cannot
        strike after the transaction is logged as committed.
        """
        if len(new_payload) != layout.payload_len:
            raise ValueError(f"payload must be exactly {layout.payload_len} bytes")
        if slot_info is None:
            slot_info = self.wait_install_slot(addr, layout)
        next_write, slot = slot_info

        _, cur_payload = self.read_current(addr, layout)
        old_header = observed_word & ~LOCKED_BIT
        self.fabric.write_word(addr.shifted(layout.meta_off), next_write + 1)
        self.fabric.write_word(addr.shifted(layout.hdr_buf_off + slot * WORD), old_header)
        self.fabric.write(addr.shifted(layout.data_buf_off + slot * layout.payload8), cur_payload)
        new_word = header_encode(cts.thread_id, cts.counter, deleted=1 if deleted else 0)
        block = new_word.to_bytes(WORD, "little") + new_payload.ljust(layout.payload8, b"\x00")
        self.fabric.write(addr, block)

    def install_version(
        self,
        addr: RemoteAddr,
        layout: RecordLayout,
        observed_word: int,
        new_payload: bytes,
        cts: CommitTimestamp,
        deleted: bool = False,
    ) -> None:
        """Single-record verify + lock + install (the transaction engine runs
        the two halves separately across its write-set)."""
        self.lock(addr, observed_word)
        try:
            self.complete_install(addr, layout, observed_word, new_payload, cts, deleted)
        except BufferStall:
            self.unlock(addr, observed_word)
            raise

    def create_record(
        self,
        addr: RemoteAddr,
        layout: RecordLayout,
        payload: bytes,
        cts: CommitTimestamp,
        deleted: bool = False,
    ) -> None:
        """Initialize a fresh block: current version only, empty buffers."""
        if len(payload) != layout.payload_len:
            raise ValueError(f"payload must be exactly {layout.payload_len} bytes")
        word = header_encode(cts.thread_id, cts.counter, deleted=1 if deleted else 0)
        block = bytearray(layout.block_size)
        block[:WORD] = word.to_bytes(WORD, "little")
        block[WORD:WORD + len(payload)] = payload
        self.fabric.write(addr, bytes(block))


# -- server-side memory management --

_HEAP_ALLOC_WORDS = 2  # alloc pointer + pad, at the start of each shard
_OVF_ALLOC_OFF = 0
_OVF_TRUNC_OFF = 8
_OVF_START = 16


@dataclass
class TableShard:
    """One table's record area on one server: [alloc word, pad, blocks...]."""

    heap_off: int
    capacity: int
    layout: RecordLayout

    @property
    def blocks_off(self) -> int:
        return self.heap_off + WORD * _HEAP_ALLOC_WORDS


class ServerMemory:
    """Pre-registered heap + overflow chunk of one memory server, the extend
    allocator over the heap, and the shard registry the mover and GC walk."""

    def __init__(self, server: MemoryServer, heap_size: int = 32 << 20, overflow_size: int = 8 << 20):
        self.server = server
        self.heap_size = heap_size
        self.heap_region = server.register_region(heap_size)
        self.overflow_region = server.register_region(overflow_size)
        self.overflow_size = overflow_size
        self._alloc_lock = threading.Lock()
        self._shard_lock = threading.Lock()
        self._ovf_lock = threading.Lock()
        self._dirty_lock = threading.Lock()
        self.reset()
        # the server tracks which records its own memory saw writes to, so the
        # mover only ever visits records with potentially unmoved versions
        # (a full continuous scan is what real hardware would do; at desk
        # scale it would monopolize the interpreter)
        server.write_observer = self._observe_write

    def reset(self) -> None:
        """Reinitialize allocator and registry state over (wiped) regions."""
        self.server.local_write_word(self.overflow_region, _OVF_ALLOC_OFF, _OVF_START)
        self.server.local_write_word(self.overflow_region, _OVF_TRUNC_OFF, 0)
        with self._alloc_lock:
            self._free = [(0, self.heap_size)]  # (offset, size), sorted
        with self._shard_lock:
            self.shards = []
        with self._ovf_lock:
            # allocation-ordered overflow entries, for prefix truncation
            self._ovf_entries = []
        with self._dirty_lock:
            self._dirty: set[tuple[int, int]] = set()

    def _observe_write(self, region_id: int, offset: int, length: int) -> None:
        if region_id != self.heap_region:
            return
        with self._shard_lock:
            shards = self.shards
        for idx, shard in enumerate(shards):
            if shard.heap_off <= offset < shard.heap_off + shard.capacity:
                rec = (offset - shard.blocks_off) // shard.layout.block_size
                if rec >= 0:
                    with self._dirty_lock:
                        self._dirty.add((idx, rec))
                return

    def drain_dirty(self) -> list[tuple[int, int]]:
        with self._dirty_lock:
            out = list(self._dirty)
            self._dirty.clear()
        return out

    def mark_dirty(self, shard_idx: int, rec: int) -> None:
        with self._dirty_lock:
            self._dirty.add((shard_idx, rec))

    def reserve_extend(self, offset: int, size: int) -> None:
        """Carve an exact range out of the free list (checkpoint restore)."""
        size = _pad8(size)
        with self._alloc_lock:
            for i, (off, length) in enumerate(self._free):
                if off <= offset and offset + size <= off + length:
                    pieces = []
                    if off < offset:
                        pieces.append((off, offset - off))
                    if offset + size < off + length:
                        pieces.append((offset + size, off + length - offset - size))
                    self._free[i:i + 1] = pieces
                    return
        raise OutOfMemory(f"range [{offset}, {offset + size}) not free")

    # -- extends --

    def allocate_extend(self, size: int, hint: int = 0) -> int:
        """First-fit allocation from the pre-registered heap; returns offset."""
        del hint  # sizing is the caller's job; the hint is advisory
        size = _pad8(size)
        with self._alloc_lock:
            for i, (off, length) in enumerate(self._free):
                if length >= size:
                    if length == size:
                        del self._free[i]
                    else:
                        self._free[i] = (off + size, length - size)
                    return off
        raise OutOfMemory(f"server {self.server.server_id}: no extend of {size} bytes")

    def free_extend(self, offset: int, size: int) -> None:
        size = _pad8(size)
        with self._alloc_lock:
            self._free.append((offset, size))
            self._free.sort()
            merged: list[tuple[int, int]] = []
            for off, length in self._free:
                if merged and merged[-1][0] + merged[-1][1] == off:
                    merged[-1] = (merged[-1][0], merged[-1][1] + length)
                else:
                    merged.append((off, length))
            self._free = merged

    def add_shard(self, heap_off: int, capacity: int, layout: RecordLayout) -> TableShard:
        shard = TableShard(heap_off, capacity, layout)
        self.server.local_write_word(self.heap_region, heap_off, WORD * _HEAP_ALLOC_WORDS)
        with self._shard_lock:
            self.shards.append(shard)
        return shard

    def shard_records(self, shard: TableShard) -> int:
        used = self.server.local_read_word(self.heap_region, shard.heap_off)
        return (used - WORD * _HEAP_ALLOC_WORDS) // shard.layout.block_size

    def record_addr(self, shard: TableShard, index: int) -> RemoteAddr:
        return RemoteAddr(
            self.server.server_id, self.heap_region, shard.blocks_off + index * shard.layout.block_size
        )

    # -- overflow (mover-only allocation) --

    def overflow_alloc(self, size: int) -> int:
        off = self.server.local_read_word(self.overflow_region, _OVF_ALLOC_OFF)
        if off + size > self.overflow_size:
            raise OutOfMemory(f"server {self.server.server_id}: overflow region full")
        self.server.local_write_word(self.overflow_region, _OVF_ALLOC_OFF, off + size)
        return off

    def note_overflow_entry(self, offset: int, size: int) -> None:
        with self._ovf_lock:
            self._ovf_entries.append((offset, size))

    def truncate_overflow(self) -> int:
        """Advance the truncation boundary over the contiguous deleted prefix."""
        boundary = self.server.local_read_word(self.overflow_region, _OVF_TRUNC_OFF)
        with self._ovf_lock:
            entries = list(self._ovf_entries)
        for off, size in entries:
            if off < boundary:
                continue
            if off != boundary:
                break
            word = self.server.local_read_word(self.overflow_region, off + WORD)
            if not word & DELETED_BIT:
                break
            boundary = off + size
        self.server.local_write_word(self.overflow_region, _OVF_TRUNC_OFF, boundary)
        return boundary


class VersionMover:
    """Per-server thread copying unmoved buffer entries to overflow, oldest
    first, then setting their moved bits. Never removes buffer content."""

    def __init__(self, memory: ServerMemory, period: float = 0.0005):
        self.memory = memory
        self.period = period
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.moved_count = 0

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(
            target=self._run, name=f"mover-{self.memory.server.server_id}", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join()
        self._thread = None

    def _run(self) -> None:
        while not self._stop.is_set():
            self.pass_once()
            self._stop.wait(self.period)

    def pass_once(self) -> int:
        """Visit records the server saw writes to since the last pass."""
        moved = 0
        with self.memory._shard_lock:
            shards = list(self.memory.shards)
        for idx, rec in self.memory.drain_dirty():
            if idx < len(shards):
                moved += self._move_record(shards[idx], rec)
        self.moved_count += moved
        return moved

    def full_scan(self) -> int:
        """Move everything movable in every record (tests, recovery)."""
        moved = 0
        with self.memory._shard_lock:
            shards = list(self.memory.shards)
        for shard in shards:
            n = self.memory.shard_records(shard)
            for i in range(n):
                moved += self._move_record(shard, i)
        self.moved_count += moved
        return moved

    def _move_record(self, shard: TableShard, index: int) -> int:
        server = self.memory.server
        layout = shard.layout
        base = shard.blocks_off + index * layout.block_size
        region = self.memory.heap_region
        k = layout.buffer_slots
        next_write = server.local_read_word(region, base + layout.meta_off)
        moved = 0
        for chrono in range(max(0, next_write - k), next_write):
            slot = chrono % k
            hdr_off = base + layout.hdr_buf_off + slot * WORD
            word = server.local_read_word(region, hdr_off)
            if word == 0 or word & MOVED_BIT:
                continue
            payload = server.local_read(region, base + layout.data_buf_off + slot * layout.payload8, layout.payload8)
            entry_size = layout.overflow_entry_size()
            try:
                entry_off = self.memory.overflow_alloc(entry_size)
            except OutOfMemory:
                return moved
            head_off = base + layout.overflow_off
            old_head = server.local_read_word(region, head_off)
            entry = old_head.to_bytes(WORD, "little") + word.to_bytes(WORD, "little") + payload
            server.local_write(self.memory.overflow_region, entry_off, entry)
            self.memory.note_overflow_entry(entry_off, entry_size)
            new_head = pack_addr(RemoteAddr(server.server_id, self.memory.overflow_region, entry_off))
            server.local_write_word(region, head_off, new_head)
            server.local_write_word(region, hdr_off, word | MOVED_BIT)
            moved += 1
        return moved


class GcSnapshotList:
    """Wall-clock-stamped copies of the timestamp vector, newest last."""

    def __init__(self, max_exec_time: float):
        self.max_exec_time = max_exec_time
        self._snaps: list[tuple[float, tuple[int, ...]]] = []
        self._lock = threading.Lock()

    def capture(self, vector: tuple[int, ...], now: float | None = None) -> None:
        with self._lock:
            self._snaps.append((now if now is not None else time.monotonic(), vector))

    def retention_snapshot(self, now: float | None = None) -> tuple[int, ...] | None:
        """Newest snapshot older than E; versions superseded under it are dead."""
        now = now if now is not None else time.monotonic()
        cutoff = now - self.max_exec_time
        with self._lock:
            idx = -1
            for i, (stamp, _) in enumerate(self._snaps):
                if stamp <= cutoff:
                    idx = i
                else:
                    break
            if idx < 0:
                return None
            del self._snaps[:idx]  # older snapshots are subsumed by the chosen one
            return self._snaps[0][1]


class GarbageCollector:
    """Per-server thread marking superseded overflow versions deleted and
    truncating the contiguous deleted prefix."""

    def __init__(self, memory: ServerMemory, snapshots: GcSnapshotList, period: float = 0.05):
        self.memory = memory
        self.snapshots = snapshots
        self.period = period
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.deleted_count = 0

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(
            target=self._run, name=f"gc-{self.memory.server.server_id}", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join()
        self._thread = None

    def _run(self) -> None:
        while not self._stop.is_set():
            self.pass_once()
            self._stop.wait(self.period)

    def pass_once(self) -> int:
        snap = self.snapshots.retention_snapshot()
        if snap is None:
            return 0
        deleted = 0
        with self.memory._shard_lock:
            shards = list(self.memory.shards)
        for shard in shards:
            n = self.memory.shard_records(shard)
            for i in range(n):
                deleted += self._gc_record(shard, i, snap)
        self.memory.truncate_overflow()
        self.deleted_count += deleted
        return deleted

    def _gc_record(self, shard: TableShard, index: int, snap: tuple[int, ...]) -> int:
        """Mark overflow versions strictly older than the newest version
        visible under `snap` as deleted."""
        server = self.memory.server
        layout = shard.layout
        base = shard.blocks_off + index * layout.block_size
        region = self.memory.heap_region

        def visible(word: int) -> bool:
            v = header_decode(word)
            return v.thread_id < len(snap) and v.counter <= snap[v.thread_id]

        newer_visible_exists = False
        cur = server.local_read_word(region, base)
        if cur and visible(cur):
            newer_visible_exists = True
        if not newer_visible_exists:
            next_write = server.local_read_word(region, base + layout.meta_off)
            k = layout.buffer_slots
            for chrono in range(next_write - 1, max(0, next_write - k) - 1, -1):
                word = server.local_read_word(region, base + layout.hdr_buf_off + (chrono % k) * WORD)
                if word and not word & MOVED_BIT and visible(word):
                    newer_visible_exists = True
                    break

        deleted = 0
        ptr = server.local_read_word(region, base + layout.overflow_off)
        while ptr:
            entry = unpack_addr(ptr)
            hdr = server.local_read_word(entry.region_id, entry.offset + WORD)
            if hdr & DELETED_BIT:
                break  # older entries already swept
            if newer_visible_exists:
                server.local_write_word(entry.region_id, entry.offset + WORD, hdr | DELETED_BIT)
                deleted += 1
            elif visible(hdr):
                newer_visible_exists = True  # this one stays; older ones go
            ptr = server.local_read_word(entry.region_id, entry.offset)
        return deleted
