"""In-process memory fabric: passive byte-addressable servers driven by verbs.

Servers own registered regions (plain bytearrays) and an optional two-sided
message handler. Client threads talk to a server through a Connection; each
connection is owned by one thread and its writes reach the server in issue
order (calls are synchronous). One-sided verbs (read / write / fetch_and_add /
compare_and_swap) touch region bytes directly and never run server code;
request/send go through the registered handler.

Every verb applies atomically under the target region's lock, so a single
read never observes a half-applied write. Callers must still not rely on
atomicity across *separate* writes: two writes from different connections can
land between the words of one large read.

Latency injection is configurable and defaults to zero. Plain read/write
latency is slept before the region lock is taken (a slow transfer does not
block other traffic); atomic latency is slept while holding the lock, plus a
per-waiter penalty, which serializes same-word atomics the way NIC-internal
latching does. Injected latency never reorders a connection's operations
because verbs are synchronous.
"""

from __future__ import annotations

import threading
import time
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

from .errors import (
    AddressOutOfBounds,
    HandlerError,
    Misaligned,
    ServerUnavailable,
    UnknownServer,
)

WORD = 8
U64_MASK = (1 << 64) - 1


class RemoteAddr(NamedTuple):
    server_id: int
    region_id: int
    offset: int

    def shifted(self, delta: int) -> "RemoteAddr":
        return RemoteAddr(self.server_id, self.region_id, self.offset + delta)


def pack_addr(addr: RemoteAddr) -> int:
    """Pack an address into a u64 for storage inside regions (server:8 region:16 offset:40)."""
    if not (0 <= addr.server_id < 256 and 0 <= addr.region_id < 65536 and 0 <= addr.offset < 1 << 40):
        raise ValueError(f"address does not fit packed form: {addr}")
    return (addr.server_id << 56) | (addr.region_id << 40) | addr.offset


def unpack_addr(word: int) -> RemoteAddr:
    return RemoteAddr(word >> 56, (word >> 40) & 0xFFFF, word & ((1 << 40) - 1))


@dataclass
class LatencyProfile:
    """Injected verb latencies, in seconds. All zero by default.

    read/write cost = base + per_word * ceil(len/8), slept outside region locks.
    atomic cost = atomic_base + atomic_penalty * concurrent-atomics-on-word,
    slept while holding the region lock.
    """

    read_base: float = 0.0
    read_per_word: float = 0.0
    write_base: float = 0.0
    write_per_word: float = 0.0
    atomic_base: float = 0.0
    atomic_penalty: float = 0.0
    send_base: float = 0.0

    def transfer(self, base: float, per_word: float, length: int) -> float:
        if base == 0.0 and per_word == 0.0:
            return 0.0
        return base + per_word * ((length + WORD - 1) // WORD)


@dataclass
class VerbCompletion:
    kind: str
    ok: bool
    value: Any = None


class MemoryRegion:
    """A registered, fixed-size byte range. Never resized after registration."""

    __slots__ = ("region_id", "length", "data", "lock", "_census_lock", "_atomic_census", "_word_gates")

    def __init__(self, region_id: int, length: int):
        self.region_id = region_id
        self.length = length
        self.data = bytearray(length)
        self.lock = threading.Lock()
        self._census_lock = threading.Lock()
        self._atomic_census: dict[int, int] = {}
        self._word_gates: dict[int, threading.Lock] = {}

    def word_gate(self, offset: int) -> threading.Lock:
        with self._census_lock:
            gate = self._word_gates.get(offset)
            if gate is None:
                gate = self._word_gates[offset] = threading.Lock()
            return gate

    def check(self, offset: int, length: int) -> None:
        if length < 1 or offset < 0 or offset + length > self.length:
            raise AddressOutOfBounds(
                f"region {self.region_id}: [{offset}, {offset + length}) outside length {self.length}"
            )

    def read_word(self, offset: int) -> int:
        return int.from_bytes(self.data[offset:offset + WORD], "little")

    def write_word(self, offset: int, value: int) -> None:
        self.data[offset:offset + WORD] = (value & U64_MASK).to_bytes(WORD, "little")


class MemoryServer:
    """Passive server: regions plus an optional message handler.

    Server-side background threads (version mover, GC) use local_read/local_write,
    which take the region lock but bypass verb accounting and latency.
    """

    def __init__(self, server_id: int):
        self.server_id = server_id
        self.available = True
        self._regions: dict[int, MemoryRegion] = {}
        self._next_region = 1
        self._reg_lock = threading.Lock()
        self.handler: Callable[[Any], Any] | None = None
        self.handler_invocations = 0
        self.verb_counts: Counter = Counter()
        self._count_lock = threading.Lock()
        # server-side bookkeeping hook: observes every write landing in this
        # server's memory (feeds the version-mover's dirty tracking)
        self.write_observer: Callable[[int, int, int], None] | None = None

    def register_region(self, length: int, region_id: int | None = None) -> int:
        with self._reg_lock:
            if region_id is None:
                region_id = self._next_region
            if region_id in self._regions:
                raise ValueError(f"region {region_id} already registered")
            self._next_region = max(self._next_region, region_id) + 1
            self._regions[region_id] = MemoryRegion(region_id, length)
            return region_id

    def drop_regions(self, keep: set[int] = frozenset()) -> None:
        """Wipe all regions except `keep` (crash simulation; journals may survive)."""
        with self._reg_lock:
            self._regions = {rid: r for rid, r in self._regions.items() if rid in keep}

    def region(self, region_id: int) -> MemoryRegion:
        try:
            return self._regions[region_id]
        except KeyError:
            raise AddressOutOfBounds(f"server {self.server_id}: no region {region_id}") from None

    def region_ids(self) -> list[int]:
        return sorted(self._regions)

    def count(self, kind: str) -> None:
        with self._count_lock:
            self.verb_counts[kind] += 1

    def register_handler(self, fn: Callable[[Any], Any]) -> None:
        self.handler = fn

    # -- co-located / server-side access (no verb accounting, no latency) --

    def local_read(self, region_id: int, offset: int, length: int) -> bytes:
        region = self.region(region_id)
        region.check(offset, length)
        with region.lock:
            return bytes(region.data[offset:offset + length])

    def local_write(self, region_id: int, offset: int, payload: bytes) -> None:
        region = self.region(region_id)
        region.check(offset, len(payload))
        with region.lock:
            region.data[offset:offset + len(payload)] = payload
        if self.write_observer is not None:
            self.write_observer(region_id, offset, len(payload))

    def local_read_word(self, region_id: int, offset: int) -> int:
        return int.from_bytes(self.local_read(region_id, offset, WORD), "little")

    def local_write_word(self, region_id: int, offset: int, value: int) -> None:
        self.local_write(region_id, offset, (value & U64_MASK).to_bytes(WORD, "little"))


class Connection:
    """One thread's channel to one server. Verbs are synchronous, hence ordered."""

    def __init__(self, fabric: "Fabric", server_id: int):
        self.fabric = fabric
        self.server_id = server_id
        self.counts: Counter = Counter()

    # -- internals --

    def _server(self) -> MemoryServer:
        return self.fabric.server(self.server_id)

    def _check_up(self, server: MemoryServer) -> None:
        if not server.available:
            raise ServerUnavailable(f"server {server.server_id} is failed")

    def _sleep(self, seconds: float) -> None:
        if seconds > 0.0:
            time.sleep(seconds)

    # -- one-sided verbs --

    def read(self, region_id: int, offset: int, length: int) -> bytes:
        server = self._server()
        self._check_up(server)
        region = server.region(region_id)
        region.check(offset, length)
        prof = self.fabric.latency
        self._sleep(prof.transfer(prof.read_base, prof.read_per_word, length))
        self._check_up(server)
        self.counts["read"] += 1
        server.count("read")
        with region.lock:
            return bytes(region.data[offset:offset + length])

    def write(self, region_id: int, offset: int, payload: bytes, signaled: bool = False):
        server = self._server()
        self._check_up(server)
        region = server.region(region_id)
        region.check(offset, len(payload))
        prof = self.fabric.latency
        self._sleep(prof.transfer(prof.write_base, prof.write_per_word, len(payload)))
        self._check_up(server)
        self.counts["write"] += 1
        server.count("write")
        with region.lock:
            region.data[offset:offset + len(payload)] = payload
        if server.write_observer is not None:
            server.write_observer(region_id, offset, len(payload))
        return VerbCompletion("write", True) if signaled else None

    def write_word(self, region_id: int, offset: int, value: int, signaled: bool = False):
        return self.write(region_id, offset, (value & U64_MASK).to_bytes(WORD, "little"), signaled)

    def read_word(self, region_id: int, offset: int) -> int:
        return int.from_bytes(self.read(region_id, offset, WORD), "little")

    def _atomic(self, region_id: int, offset: int, kind: str, fn) -> int:
        server = self._server()
        self._check_up(server)
        if offset % WORD != 0:
            raise Misaligned(f"atomic at unaligned offset {offset}")
        region = server.region(region_id)
        region.check(offset, WORD)
        with region._census_lock:
            region._atomic_census[offset] = region._atomic_census.get(offset, 0) + 1
        try:
            # same-word atomics serialize through the word gate (and pay their
            # injected latency inside it, the way NIC-internal latching
            # behaves); the region lock is held only for the actual RMW
            with region.word_gate(offset):
                prof = self.fabric.latency
                if prof.atomic_base or prof.atomic_penalty:
                    with region._census_lock:
                        others = region._atomic_census[offset] - 1
                    time.sleep(prof.atomic_base + prof.atomic_penalty * others)
                self._check_up(server)
                self.counts[kind] += 1
                server.count(kind)
                with region.lock:
                    old = region.read_word(offset)
                    new = fn(old)
                    if new is not None:
                        region.write_word(offset, new)
                return old
        finally:
            with region._census_lock:
                n = region._atomic_census[offset] - 1
                if n:
                    region._atomic_census[offset] = n
                else:
                    del region._atomic_census[offset]

    def fetch_and_add(self, region_id: int, offset: int, increment: int) -> int:
        return self._atomic(region_id, offset, "faa", lambda old: (old + increment) & U64_MASK)

    def compare_and_swap(self, region_id: int, offset: int, check: int, new: int) -> int:
        return self._atomic(region_id, offset, "cas", lambda old: new if old == check else None)

    # -- two-sided verbs --

    def request(self, payload: Any) -> Any:
        server = self._server()
        self._check_up(server)
        if server.handler is None:
            raise HandlerError(f"server {server.server_id} has no handler")
        self._sleep(self.fabric.latency.send_base)
        self._check_up(server)
        self.counts["send"] += 1
        server.count("send")
        server.handler_invocations += 1
        try:
            return server.handler(payload)
        except (ServerUnavailable, HandlerError):
            raise
        except Exception as exc:
            raise HandlerError(str(exc)) from exc

    def send(self, payload: Any) -> None:
        """Unsignaled two-sided send: handler runs, reply is discarded."""
        self.request(payload)


class Fabric:
    """The cluster substrate: servers plus a shared latency profile."""

    def __init__(self, latency: LatencyProfile | None = None):
        self.latency = latency or LatencyProfile()
        self._servers: dict[int, MemoryServer] = {}
        self._local = threading.local()

    def add_server(self, server_id: int) -> MemoryServer:
        if server_id in self._servers:
            raise ValueError(f"server {server_id} exists")
        server = MemoryServer(server_id)
        self._servers[server_id] = server
        return server

    def server(self, server_id: int) -> MemoryServer:
        try:
            return self._servers[server_id]
        except KeyError:
            raise UnknownServer(f"no server {server_id}") from None

    def server_ids(self) -> list[int]:
        return sorted(self._servers)

    def connect(self, server_id: int) -> Connection:
        self.server(server_id)
        return Connection(self, server_id)

    def conn(self, server_id: int) -> Connection:
        """The calling thread's cached connection to server_id (one per thread per server)."""
        cache = getattr(self._local, "conns", None)
        if cache is None:
            cache = self._local.conns = {}
        conn = cache.get(server_id)
        if conn is None:
            conn = cache[server_id] = self.connect(server_id)
        return conn

    def fail_server(self, server_id: int) -> None:
        self.server(server_id).available = False

    def recover_server(self, server_id: int) -> None:
        self.server(server_id).available = True

    # -- address-based convenience (thread-cached connections) --

    def read(self, addr: RemoteAddr, length: int) -> bytes:
        return self.conn(addr.server_id).read(addr.region_id, addr.offset, length)

    def write(self, addr: RemoteAddr, payload: bytes, signaled: bool = False):
        return self.conn(addr.server_id).write(addr.region_id, addr.offset, payload, signaled)

    def read_word(self, addr: RemoteAddr) -> int:
        return self.conn(addr.server_id).read_word(addr.region_id, addr.offset)

    def write_word(self, addr: RemoteAddr, value: int, signaled: bool = False):
        return self.conn(addr.server_id).write_word(addr.region_id, addr.offset, value, signaled)

    def fetch_and_add(self, addr: RemoteAddr, increment: int) -> int:
        return self.conn(addr.server_id).fetch_and_add(addr.region_id, addr.offset, increment)

    def compare_and_swap(self, addr: RemoteAddr, check: int, new: int) -> int:
        return self.conn(addr.server_id).compare_and_swap(addr.region_id, addr.offset, check, new)

    def request(self, server_id: int, payload: Any) -> Any:
        return self.conn(server_id).request(payload)
