"""Brute-force Generalized Snapshot Isolation validation over history events.

The engine emits one event stream per run: begin (with the acquired snapshot
vector), read (record and the version observed, or none), lock, install
(record and the installed version), publish (the commit timestamp), abort.
Naive-oracle histories embed their scalar timestamps as single-slot vectors,
so one code path checks both modes.

check_gsi validates, per committed transaction T:

  R1  every read of record r returned the newest version of r (by install
      order) visible under T's snapshot -- or "absent" when no visible
      version exists or the newest visible one is a delete tombstone.

  R2  no two committed transactions with overlapping [rts-acquire, publish]
      windows installed versions of the same record (first-committer-wins).
      Stated over vectors: each committed writer's snapshot must cover the
      version it overwrote; a window overlap is exactly a missing cover.

The checker is deliberately independent of the protocol code: it recomputes
expected reads from install events and vectors alone.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .errors import IncompleteHistory

BEGIN = "begin"
READ = "read"
LOCK = "lock"
INSTALL = "install"
PUBLISH = "publish"
ABORT = "abort"


class HistoryEvent(NamedTuple):
    seq: int
    thread: int
    txn: int
    kind: str
    record: str | None = None
    version: tuple[int, int] | None = None  # (thread_id, counter)
    vector: tuple[int, ...] | None = None
    deleted: int = 0


class EventLog:
    """Bounded in-memory event capture; drops are fatal for checking."""

    def __init__(self, capacity: int = 10_000_000):
        self.capacity = capacity
        self._events: list[HistoryEvent] = []
        self._lock = threading.Lock()
        self._seq = 0
        self.dropped = 0

    def emit(self, thread: int, txn: int, kind: str, record: str | None = None,
             version: tuple[int, int] | None = None, vector: tuple[int, ...] | None = None,
             deleted: int = 0) -> None:
        with self._lock:
            if len(self._events) >= self.capacity:
                self.dropped += 1
                return
            self._seq += 1
            self._events.append(HistoryEvent(self._seq, thread, txn, kind, record, version, vector, deleted))

    def snapshot(self) -> list[HistoryEvent]:
        with self._lock:
            if self.dropped:
                raise IncompleteHistory(f"{self.dropped} events dropped")
            return list(self._events)

    def clear(self) -> None:
        with self._lock:
            self._events.clear()
            self.dropped = 0


def dump_events(events: Iterable[HistoryEvent], path: str) -> None:
    """Line format: wall-order thread txn kind record header-word vector(csv).
    The header word packs the version fields (29-bit thread id, 32-bit
    counter, deleted bit) exactly as the record layout does."""
    from .memstore import header_encode

    with open(path, "w") as f:
        for e in events:
            word = header_encode(e.version[0], e.version[1], deleted=e.deleted) \
                if e.version else "-"
            vec = ",".join(map(str, e.vector)) if e.vector is not None else "-"
            rec = e.record if e.record is not None else "-"
            f.write(f"{e.seq} {e.thread} {e.txn} {e.kind} {rec} {word} {vec}\n")


def load_events(path: str) -> list[HistoryEvent]:
    from .memstore import header_decode

    out = []
    with open(path) as f:
        for line in f:
            seq, thread, txn, kind, rec, word, vec = line.split(" ")
            version = None
            deleted = 0
            if word != "-":
                h = header_decode(int(word))
                version = (h.thread_id, h.counter)
                deleted = h.deleted
            vector = None
            vec = vec.strip()
            if vec != "-":
                vector = tuple(int(x) for x in vec.split(",")) if vec else ()
            out.append(HistoryEvent(int(seq), int(thread), int(txn), kind,
                                    None if rec == "-" else rec, version, vector, deleted))
    return out


@dataclass
class Violation:
    rule: str
    record: str | None
    txns: tuple
    detail: str

    def __str__(self):
        return f"[{self.rule}] record={self.record} txns={self.txns}: {self.detail}"


@dataclass
class _Txn:
    thread: int
    txn: int
    begin_seq: int = 0
    rts: tuple[int, ...] | None = None
    reads: list = field(default_factory=list)      # (seq, record, version|None)
    installs: list = field(default_factory=list)   # (seq, record, version, deleted)
    publish_seq: int | None = None
    aborted: bool = False

    @property
    def key(self):
        return (self.thread, self.txn)


def _group(events: list[HistoryEvent]) -> dict:
    txns: dict[tuple, _Txn] = {}
    for e in events:
        t = txns.get((e.thread, e.txn))
        if t is None:
            t = txns[(e.thread, e.txn)] = _Txn(e.thread, e.txn)
        if e.kind == BEGIN:
            t.begin_seq = e.seq
            t.rts = e.vector
        elif e.kind == READ:
            t.reads.append((e.seq, e.record, e.version))
        elif e.kind == INSTALL:
            t.installs.append((e.seq, e.record, e.version, e.deleted))
        elif e.kind == PUBLISH:
            t.publish_seq = e.seq
        elif e.kind == ABORT:
            t.aborted = True
    return txns


def _visible(version: tuple[int, int], rts: tuple[int, ...]) -> bool:
    tid, counter = version
    return tid < len(rts) and counter <= rts[tid]


def check_gsi(events: list[HistoryEvent]) -> list[Violation]:
    txns = _group(events)
    committed = [t for t in txns.values() if not t.aborted and t.publish_seq is not None]

    # per-record install sequence of committed transactions, in wall order
    # (installs on one record are serialized by the record lock)
    installs_by_record: dict[str, list] = {}
    for t in committed:
        for seq, record, version, deleted in t.installs:
            installs_by_record.setdefault(record, []).append((seq, version, deleted, t.key))
    for chain in installs_by_record.values():
        chain.sort()

    violations: list[Violation] = []

    # R1: snapshot reads
    for t in committed:
        if t.rts is None:
            violations.append(Violation("R1", None, (t.key,), "transaction has no begin snapshot"))
            continue
        for seq, record, observed in t.reads:
            expected = None
            for _, version, deleted, _ in installs_by_record.get(record, ()):
                if _visible(version, t.rts):
                    expected = None if deleted else version
            if observed != expected:
                violations.append(Violation(
                    "R1", record, (t.key,),
                    f"read {observed} but newest visible under {t.rts} is {expected}",
                ))

    # R2: write-write exclusion. Two committed writers of one record have
    # overlapping [rts-acquire, publish] windows exactly when the later
    # installer's snapshot does not cover its predecessor's version (its
    # window started before the predecessor's publish landed) - a lost
    # update. The vector form is timing-free: wall-clock event order cannot
    # place a prefetched snapshot's true acquisition point.
    for record, chain in installs_by_record.items():
        prev_version = None
        prev_key = None
        for _, version, _, key in chain:
            t = txns[key]
            if prev_version is not None and prev_key != key:
                if t.rts is None or not _visible(prev_version, t.rts):
                    violations.append(Violation(
                        "R2", record, (prev_key, key),
                        f"{key} overwrote {prev_version} of {prev_key} without "
                        f"covering it in its snapshot {t.rts}",
                    ))
            prev_version = version
            prev_key = key
    return violations


def check_monotonic_vectors(events: list[HistoryEvent]) -> list[Violation]:
    """Per-thread snapshot sequences must be componentwise non-decreasing.

    Applies to unpartitioned vector-oracle runs; partitioned runs only keep
    per-slot monotonicity and are checked with check_per_slot_monotonic.
    """
    last: dict[int, tuple[int, ...]] = {}
    out: list[Violation] = []
    for e in events:
        if e.kind != BEGIN or e.vector is None:
            continue
        prev = last.get(e.thread)
        if prev is not None and len(prev) == len(e.vector):
            if any(b < a for a, b in zip(prev, e.vector)):
                out.append(Violation(
                    "monotonic", None, ((e.thread, e.txn),),
                    f"thread {e.thread} observed {prev} then {e.vector}",
                ))
        last[e.thread] = e.vector
    return out


def check_per_slot_monotonic(events: list[HistoryEvent]) -> list[Violation]:
    """Weaker check for partitioned vectors: each slot alone never regresses
    in any single thread's observation sequence (same as componentwise)."""
    return check_monotonic_vectors(events)
