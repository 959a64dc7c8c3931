"""Timestamp services.

Two oracles share the visibility rule "version <i, t> is visible under a
snapshot V iff t <= V[i]":

* NaiveOracle - one global read-timestamp word, one global commit counter
  bumped with fetch-and-add, and a completion bitset scanned by a management
  thread that advances the read timestamp to the largest prefix-complete
  commit. Kept as the contention baseline.

* VectorOracle - one counter slot per execution thread (or per compute server
  when compressed). A thread mints its next commit timestamp locally and makes
  it visible with a single one-sided write to its slot; readers fetch the
  whole vector as their snapshot. Optional prefetch thread and slot striping
  across servers.

The completion bitset is addressed by absolute ring position (cts mod
capacity) instead of a shifting base offset: a reporter then needs exactly one
fetch-and-add and cannot race an offset rotation. The management thread zeroes
ring words once the read timestamp passes them; when the ring is
three-quarters full, timestamp issuance stalls until the prefix catches up
(the rotation cannot reclaim space ahead of an incomplete prefix).
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import NamedTuple

from .errors import OracleExhausted, StalePending
from .fabric import Fabric, RemoteAddr, WORD

MAX_THREAD_ID = 1 << 29
MAX_COUNTER = 1 << 32


class CommitTimestamp(NamedTuple):
    thread_id: int
    counter: int


def is_visible(version: CommitTimestamp, slots) -> bool:
    """True iff the version's counter is covered by the snapshot's slot."""
    if version.thread_id >= len(slots) or version.thread_id < 0:
        raise IndexError(f"thread id {version.thread_id} outside snapshot of {len(slots)} slots")
    return version.counter <= slots[version.thread_id]


@dataclass
class OracleOptions:
    mode: str = "vector"  # "vector" | "naive"
    fetch_thread: bool = False
    compress: bool = False
    partitions: int = 1
    fetch_period: float = 100e-6
    # injected cost of consuming the shared prefetched copy, per vector slot
    consume_per_slot: float = 0.0

    def validate(self, memory_servers: int) -> None:
        if self.mode not in ("vector", "naive"):
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        if self.partitions < 1 or self.partitions > memory_servers:
            raise ValueError("partitions must be in [1, memory server count]")


class VectorOracle:
    """Timestamp vector striped over one or more memory-server regions.

    Slot i lives on partition (i mod P) at word offset (i div P). With P=1
    the whole vector is one region and any read of it is a consistent
    snapshot, which is what makes single-server placement monotonic.
    """

    def __init__(self, fabric: Fabric, partition_servers: list[int], n_slots: int):
        if not partition_servers:
            raise ValueError("need at least one partition server")
        if n_slots < 1:
            raise ValueError("need at least one slot")
        self.fabric = fabric
        self.servers = list(partition_servers)
        self.n_slots = n_slots
        self.partitions = len(partition_servers)
        self._part_slots = [len(range(p, n_slots, self.partitions)) for p in range(self.partitions)]
        self.regions = []
        for p, sid in enumerate(self.servers):
            length = max(WORD, WORD * self._part_slots[p])
            self.regions.append(fabric.server(sid).register_region(length))
        self._frozen = False
        self._writers: dict[int, GroupSlotWriter] = {}

    def freeze(self) -> None:
        self._frozen = True

    def slot_addr(self, slot: int) -> RemoteAddr:
        p = slot % self.partitions
        return RemoteAddr(self.servers[p], self.regions[p], WORD * (slot // self.partitions))

    def read_vector(self) -> tuple[int, ...]:
        parts = []
        for p, sid in enumerate(self.servers):
            raw = self.fabric.conn(sid).read(self.regions[p], 0, WORD * max(1, self._part_slots[p]))
            parts.append([int.from_bytes(raw[i:i + WORD], "little") for i in range(0, len(raw), WORD)])
        return tuple(parts[i % self.partitions][i // self.partitions] for i in range(self.n_slots))

    def thread_writer(self, slot: int) -> "ThreadSlotWriter":
        if slot >= MAX_THREAD_ID:
            raise ValueError(f"thread id {slot} exceeds 29-bit header field")
        return ThreadSlotWriter(self, slot)

    def group_writer(self, slot: int) -> "GroupSlotWriter":
        """Shared writer for one compressed slot (one per compute server)."""
        if slot >= MAX_THREAD_ID:
            raise ValueError(f"slot {slot} exceeds 29-bit header field")
        writer = self._writers.get(slot)
        if writer is None:
            writer = self._writers[slot] = GroupSlotWriter(self, slot)
        return writer


class ThreadSlotWriter:
    """Owner-thread-only commit counter for one vector slot."""

    def __init__(self, oracle: VectorOracle, slot: int):
        self.oracle = oracle
        self.slot = slot
        self.local_t = 0
        self.pending = False

    def next_commit(self) -> CommitTimestamp:
        if self.pending:
            raise StalePending(f"slot {self.slot}: previous commit timestamp not yet published")
        if self.local_t + 1 >= MAX_COUNTER:
            raise OracleExhausted(f"slot {self.slot} counter overflow")
        self.pending = True
        return CommitTimestamp(self.slot, self.local_t + 1)

    def publish(self, ts: CommitTimestamp) -> None:
        if ts.counter != self.local_t + 1:
            raise ValueError(f"publish out of order: {ts.counter} after {self.local_t}")
        addr = self.oracle.slot_addr(self.slot)
        self.oracle.fabric.write_word(addr, ts.counter)
        self.local_t = ts.counter
        self.pending = False


class GroupSlotWriter:
    """Compressed slot shared by one compute server's threads.

    next_commit hands out counter tickets under a local lock; publish releases
    tickets strictly in order (a slot value must never become visible before
    every smaller counter's transaction finished installing) and coalesces the
    remote write: the publish is unsignaled, so the caller returns once its
    value is covered by some in-flight write of an equal-or-larger counter.
    """

    def __init__(self, oracle: VectorOracle, slot: int):
        self.oracle = oracle
        self.slot = slot
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._counter = 0
        self._published = 0  # highest counter released in-order
        self._dirty = 0      # highest counter needing a remote write
        self._flushed = 0    # highest counter written remotely
        self._flushing = False

    def next_commit(self) -> CommitTimestamp:
        with self._lock:
            if self._counter + 1 >= MAX_COUNTER:
                raise OracleExhausted(f"slot {self.slot} counter overflow")
            self._counter += 1
            return CommitTimestamp(self.slot, self._counter)

    def publish(self, ts: CommitTimestamp) -> None:
        with self._cond:
            while self._published != ts.counter - 1:
                self._cond.wait()
            self._published = ts.counter
            self._dirty = ts.counter
            self._cond.notify_all()
            if self._flushing:
                return
            self._flushing = True
        addr = self.oracle.slot_addr(self.slot)
        while True:
            with self._lock:
                target = self._dirty
            self.oracle.fabric.write_word(addr, target)
            with self._lock:
                self._flushed = target
                if self._dirty == target:
                    self._flushing = False
                    return

    def drain(self) -> None:
        """Wait until every published counter is remotely visible."""
        while True:
            with self._lock:
                if not self._flushing and self._flushed == self._dirty:
                    return
            time.sleep(0.0005)


class PrefetchedVector:
    """Dedicated per-compute-server fetch thread refreshing a shared copy.

    Consumers read the shared copy instead of issuing fabric reads; consuming
    costs consume_per_slot * n_slots of injected latency (local latch/copy),
    so compression shrinks this cost too.
    """

    def __init__(self, oracle: VectorOracle, period: float, consume_per_slot: float = 0.0):
        self.oracle = oracle
        self.period = period
        self.consume_per_slot = consume_per_slot
        self._snapshot = tuple([0] * oracle.n_slots)
        self._stamp = 0.0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        if self._thread is not None:
            raise RuntimeError("fetch thread already running")
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="vector-fetch", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join()
        self._thread = None

    def _run(self) -> None:
        while not self._stop.is_set():
            snap = self.oracle.read_vector()
            self._snapshot = snap
            self._stamp = time.monotonic()
            if self.period > 0:
                self._stop.wait(self.period)

    def consume(self) -> tuple[int, ...]:
        cost = self.consume_per_slot * self.oracle.n_slots
        if cost > 0.0:
            time.sleep(cost)
        return self._snapshot

    def staleness(self) -> float:
        return time.monotonic() - self._stamp


NAIVE_CAP_BITS = 1 << 20
_RTS_OFF = 0
_CTS_OFF = 8
_CLEARED_OFF = 16
_BITS_OFF = 32
_FULL_WORD = (1 << 64) - 1


class NaiveOracle:
    """Global-counter oracle of the baseline protocol.

    Layout in its region: rts word, cts word, cleared-boundary word, then the
    completion ring bitset. get_cts is a fetch-and-add on the cts word; report
    sets the completion bit with a fetch-and-add of 2^k (each position is set
    exactly once per ring lap, so the add cannot carry); the management thread
    advances rts to the largest prefix-complete timestamp and zeroes ring
    words the prefix has fully passed.
    """

    def __init__(self, fabric: Fabric, server_id: int, cap_bits: int = NAIVE_CAP_BITS):
        if cap_bits % 64:
            raise ValueError("capacity must be word aligned")
        self.fabric = fabric
        self.server_id = server_id
        self.cap_bits = cap_bits
        self.region = fabric.server(server_id).register_region(_BITS_OFF + cap_bits // 8)
        # commit timestamps start at 1; rts 0 means "nothing visible"
        fabric.server(server_id).local_write_word(self.region, _CTS_OFF, 1)
        self._mgmt_stop = threading.Event()
        self._mgmt_thread: threading.Thread | None = None

    def addr(self, offset: int) -> RemoteAddr:
        return RemoteAddr(self.server_id, self.region, offset)

    def get_rts(self) -> int:
        return self.fabric.read_word(self.addr(_RTS_OFF))

    def get_cts(self, rts_hint: int | None = None) -> int:
        cts = self.fabric.fetch_and_add(self.addr(_CTS_OFF), 1)
        while cts - (rts_hint if rts_hint is not None else 0) >= self.cap_bits * 3 // 4:
            # ring nearly full: stall until the management thread catches up
            rts_hint = self.get_rts()
            if cts - rts_hint < self.cap_bits * 3 // 4:
                break
            time.sleep(0.001)
        return cts

    def report(self, cts: int, committed: bool) -> None:
        del committed  # the bit records completion; the outcome is not stored
        pos = cts % self.cap_bits
        word_off = _BITS_OFF + (pos // 64) * WORD
        self.fabric.fetch_and_add(self.addr(word_off), 1 << (pos % 64))

    def advance(self) -> int:
        """Advance rts to the largest prefix-complete timestamp; returns it."""
        server = self.fabric.server(self.server_id)
        rts = server.local_read_word(self.region, _RTS_OFF)
        pos = rts + 1
        while True:
            ring = pos % self.cap_bits
            word_off = _BITS_OFF + (ring // 64) * WORD
            word = server.local_read_word(self.region, word_off)
            if ring % 64 == 0 and word == _FULL_WORD:
                pos += 64
                continue
            if word & (1 << (ring % 64)):
                pos += 1
                continue
            break
        new_rts = pos - 1
        if new_rts > rts:
            server.local_write_word(self.region, _RTS_OFF, new_rts)
            self._clear_passed(server, new_rts)
        return new_rts

    def _clear_passed(self, server, rts: int) -> None:
        # zero ring words whose 64 timestamps are all <= rts, so the next lap
        # starts from clean words; keep a cleared boundary for observability
        cleared = server.local_read_word(self.region, _CLEARED_OFF)
        boundary = ((rts + 1) // 64) * 64
        while cleared < boundary:
            ring = cleared % self.cap_bits
            server.local_write_word(self.region, _BITS_OFF + (ring // 64) * WORD, 0)
            cleared += 64
        server.local_write_word(self.region, _CLEARED_OFF, cleared)

    def start_management(self, period: float = 0.002) -> None:
        if self._mgmt_thread is not None:
            return
        self._mgmt_stop.clear()

        def loop():
            while not self._mgmt_stop.is_set():
                self.advance()
                self._mgmt_stop.wait(period)

        self._mgmt_thread = threading.Thread(target=loop, name="naive-oracle-mgmt", daemon=True)
        self._mgmt_thread.start()

    def stop_management(self) -> None:
        if self._mgmt_thread is None:
            return
        self._mgmt_stop.set()
        self._mgmt_thread.join()
        self._mgmt_thread = None
