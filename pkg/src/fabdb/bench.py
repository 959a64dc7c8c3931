"""Two-transaction TPC-C-lite workload, metrics, and the benchmark harness.

The schema is warehouse/district/customer/stock/item/order tables plus a
customer-name hash index and an order-key B+-tree. New-order reads the
warehouse, bumps the district's next-order id, reads item prices, updates
5-15 stock rows (item choice uniform or zipf-skewed), and inserts one order
record (order lines folded into its fixed payload). Payment updates
warehouse/district year-to-date and a customer balance, finding the customer
through the name index 40% of the time.

Warehouses are stored N-per-memory-server: each warehouse-affine table is a
group of per-server physical tables (the catalog's partition map), routed by
the warehouse's contiguous range owner. The item table and both secondary
indexes stay global. The degree of distribution is the probability that a
new-order touches a warehouse stored on a remote memory server; when
triggered, exactly one order line's supplying warehouse is drawn from the
remote servers' warehouses.

Order lines sample items without replacement, so a transaction never writes
the same stock record twice.
"""

from __future__ import annotations

import bisect
import json
import os
import random
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field

from .checker import check_gsi, dump_events
from .fabric import LatencyProfile
from .index import SecondaryHashIndex, fnv1a_64
from .oracle import OracleOptions
from .txn import Cluster, ClusterConfig, FIRST_USER_STMT, Outcome

STMT_NEW_ORDER = FIRST_USER_STMT
STMT_PAYMENT = FIRST_USER_STMT + 1

_WAREHOUSE = struct.Struct("<QI4x")          # ytd, tax
_DISTRICT = struct.Struct("<IQI")            # next_o_id, ytd, tax
_CUSTOMER = struct.Struct("<qQI16s4x")       # balance, ytd_payment, payment_cnt, name
_STOCK = struct.Struct("<iQI")               # quantity, ytd, order_cnt
_ITEM = struct.Struct("<I16s4x")             # price, name
_MAX_LINES = 15
_ORDER = struct.Struct("<II" + "III" * _MAX_LINES)  # c_id, ol_cnt, lines


def wh_key(w: int) -> int:
    return w


def district_key(w: int, d: int) -> int:
    return (w << 8) | d


def customer_key(w: int, d: int, c: int) -> int:
    return (w << 24) | (d << 16) | c


def stock_key(w: int, i: int) -> int:
    return (w << 32) | i


def order_key(w: int, d: int, o: int) -> int:
    return (w << 40) | (d << 32) | o


def home_server_of(w: int, n_wh: int, memory_servers: int) -> int:
    """Contiguous warehouse ranges per memory server (N warehouses each)."""
    return (w - 1) * memory_servers // n_wh


def phys(table: str, w: int, n_wh: int, memory_servers: int) -> str:
    """Physical partition name of a warehouse-affine table."""
    return f"{table}@{home_server_of(w, n_wh, memory_servers)}"


def customer_name(c_key: int) -> bytes:
    """Last name, pooled per district so by-name lookups stay in-district
    (7-name pool: several customers share a name, exercising the middle-pick)."""
    district_part = c_key >> 16
    return (b"N%010dC%03d" % (district_part, (c_key & 0xFFFF) % 7))[:16]


def name_attr(name: bytes) -> int:
    return fnv1a_64(name) or 1


class ZipfSampler:
    """Inverse-CDF sampling of P(k) = k^-alpha / H(n, alpha), ranks 1..n."""

    _cache: dict[tuple[int, float], list[float]] = {}

    def __init__(self, n: int, alpha: float):
        if n < 1 or alpha < 0:
            raise ValueError("need n >= 1 and alpha >= 0")
        self.n = n
        self.alpha = alpha
        key = (n, alpha)
        cum = self._cache.get(key)
        if cum is None:
            total = 0.0
            cum = []
            for k in range(1, n + 1):
                total += k ** -alpha
                cum.append(total)
            cum = [c / total for c in cum]
            self._cache[key] = cum
        self.cum = cum

    def sample(self, rng: random.Random) -> int:
        return bisect.bisect_left(self.cum, rng.random()) + 1


def zipf_sample(n: int, alpha: float, rng: random.Random) -> int:
    return ZipfSampler(n, alpha).sample(rng)


def parse_skew(skew: str) -> float | None:
    """'uniform' -> None; 'zipf:0.8' -> 0.8."""
    if skew == "uniform":
        return None
    if skew.startswith("zipf:"):
        return float(skew.split(":", 1)[1])
    raise ValueError(f"unknown skew {skew!r}")


@dataclass
class BenchConfig:
    memory_servers: int = 2
    compute_servers: int = 2
    threads_per_server: int = 4
    warehouses: int | None = None  # default: 50 per memory server
    districts: int = 10
    customers_per_district: int = 30
    items: int = 1000
    dist_pct: int = 10
    skew: str = "uniform"
    oracle: str = "vector"
    fetch_thread: bool = False
    compress: bool = False
    partitions: int = 1
    fetch_period: float = 100e-6
    consume_per_slot: float = 0.0
    latency: LatencyProfile = field(default_factory=LatencyProfile)
    duration: float = 2.0
    txn_limit: int | None = None
    seed: int = 1
    locality: bool = False
    check: bool = False
    capture_events: bool = False
    new_order_share: float = 0.5
    payment_by_name: float = 0.4
    gc_enabled: bool = False
    gc_interval: float = 60.0
    gc_max_exec_time: float = 3600.0
    buffer_slots: int = 16
    retry_cap: int = 100
    monitoring: bool = False
    heap_size: int = 48 << 20
    overflow_size: int = 24 << 20
    expected_orders: int | None = None  # override when one cluster serves many runs
    out_dir: str | None = None

    def validate(self) -> None:
        if min(self.memory_servers, self.compute_servers, self.threads_per_server, self.items) < 1:
            raise ValueError("all counts must be >= 1")
        if not 0 <= self.dist_pct <= 100:
            raise ValueError("dist_pct must be in [0, 100]")
        parse_skew(self.skew)

    @property
    def n_warehouses(self) -> int:
        return self.warehouses if self.warehouses is not None else 50 * self.memory_servers

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(
            memory_servers=self.memory_servers,
            compute_servers=self.compute_servers,
            threads_per_server=self.threads_per_server,
            oracle=OracleOptions(
                mode=self.oracle, fetch_thread=self.fetch_thread, compress=self.compress,
                partitions=self.partitions, fetch_period=self.fetch_period,
                consume_per_slot=self.consume_per_slot,
            ),
            latency=self.latency,
            heap_size=self.heap_size,
            overflow_size=self.overflow_size,
            locality=self.locality,
            buffer_slots=self.buffer_slots,
            retry_cap=self.retry_cap,
            monitoring=self.monitoring,
            gc_enabled=self.gc_enabled,
            gc_interval=self.gc_interval,
            gc_max_exec_time=self.gc_max_exec_time,
            capture_events=self.capture_events or self.check,
        )


# -- statement programs (deterministic closures over their parameters; the
# warehouse partition layout is bound at registration time) --


def new_order(ops, params, n_wh: int, m: int):
    w, d, c, lines = params
    _ = ops.read(phys("warehouse", w, n_wh, m), wh_key(w))
    dtable = phys("district", w, n_wh, m)
    draw = ops.read(dtable, district_key(w, d))
    next_o_id, ytd, tax = _DISTRICT.unpack(draw)
    ops.update(dtable, district_key(w, d), _DISTRICT.pack(next_o_id + 1, ytd, tax))
    _ = ops.read(phys("customer", w, n_wh, m), customer_key(w, d, c))
    for i_id, supply_w, qty in lines:
        ops.read("item", i_id)
        stable = phys("stock", supply_w, n_wh, m)
        sraw = ops.read(stable, stock_key(supply_w, i_id))
        squant, sytd, scnt = _STOCK.unpack(sraw)
        squant = squant - qty if squant - qty >= 10 else squant - qty + 91
        ops.update(stable, stock_key(supply_w, i_id), _STOCK.pack(squant, sytd + qty, scnt + 1))
    flat = []
    for i_id, supply_w, qty in lines:
        flat.extend((i_id, supply_w, qty))
    flat.extend([0, 0, 0] * (_MAX_LINES - len(lines)))
    okey = order_key(w, d, next_o_id)
    ops.insert(phys("order", w, n_wh, m), okey, _ORDER.pack(c, len(lines), *flat))
    ops.btree_insert("order_idx", okey, okey)


def payment(ops, params, n_wh: int, m: int):
    w, d, c_key, amount, by_name = params
    wtable = phys("warehouse", w, n_wh, m)
    wraw = ops.read(wtable, wh_key(w))
    wytd, wtax = _WAREHOUSE.unpack(wraw)
    ops.update(wtable, wh_key(w), _WAREHOUSE.pack(wytd + amount, wtax))
    dtable = phys("district", w, n_wh, m)
    draw = ops.read(dtable, district_key(w, d))
    next_o_id, dytd, dtax = _DISTRICT.unpack(draw)
    ops.update(dtable, district_key(w, d), _DISTRICT.pack(next_o_id, dytd + amount, dtax))
    if by_name:
        pkeys = ops.index_lookup("customer_name", name_attr(customer_name(c_key)))
        pkeys = sorted(k for k in pkeys)
        c_key = pkeys[len(pkeys) // 2] if pkeys else c_key
    ctable = phys("customer", c_key >> 24, n_wh, m)
    craw = ops.read(ctable, c_key)
    bal, cytd, cnt, cname = _CUSTOMER.unpack(craw)
    ops.update(ctable, c_key, _CUSTOMER.pack(bal - amount, cytd + amount, cnt + 1, cname))


# -- schema load --


def load_schema(cluster: Cluster, cfg: BenchConfig) -> None:
    n_wh = cfg.n_warehouses
    m = cfg.memory_servers
    if n_wh < m:
        raise ValueError("need at least one warehouse per memory server")
    per_server_wh = [0] * m
    for w in range(1, n_wh + 1):
        per_server_wh[home_server_of(w, n_wh, m)] += 1

    expected_orders = cfg.expected_orders if cfg.expected_orders is not None else max(
        2048, cfg.txn_limit if cfg.txn_limit else int(min(cfg.duration, 20.0) * 3000))
    metas = {}
    for s, sid in enumerate(cluster.memory_ids):
        wh_here = max(1, per_server_wh[s])
        metas[f"warehouse@{s}"] = cluster.create_table(
            f"warehouse@{s}", _WAREHOUSE.size, max(16, wh_here), cfg.buffer_slots, servers=[sid])
        metas[f"district@{s}"] = cluster.create_table(
            f"district@{s}", _DISTRICT.size, max(16, wh_here * cfg.districts), cfg.buffer_slots,
            servers=[sid])
        metas[f"customer@{s}"] = cluster.create_table(
            f"customer@{s}", _CUSTOMER.size,
            max(16, wh_here * cfg.districts * cfg.customers_per_district), cfg.buffer_slots,
            servers=[sid])
        metas[f"stock@{s}"] = cluster.create_table(
            f"stock@{s}", _STOCK.size, max(16, wh_here * cfg.items), cfg.buffer_slots, servers=[sid])
        # orders are insert-only: one-slot version buffers, sized by run length
        metas[f"order@{s}"] = cluster.create_table(
            f"order@{s}", _ORDER.size, max(512, expected_orders // m + 1), buffer_slots=1,
            servers=[sid])
    it = cluster.create_table("item", _ITEM.size, max(64, cfg.items), cfg.buffer_slots)
    n_cust = n_wh * cfg.districts * cfg.customers_per_district
    cluster.create_hash_index("customer_name", max(64, n_cust * 2))
    cluster.create_btree("order_idx", 0, order_key(n_wh + 1, 0, 0), order=64)

    cluster.begin_load()
    for i in range(1, cfg.items + 1):
        cluster.bulk_put(it, i, _ITEM.pack(100 + (i % 900), b"ITEM%012d" % i))
    name_index = SecondaryHashIndex(cluster.fabric, _meta(cluster, "customer_name"))
    for w in range(1, n_wh + 1):
        s = home_server_of(w, n_wh, m)
        cluster.bulk_put(metas[f"warehouse@{s}"], wh_key(w), _WAREHOUSE.pack(0, 1000 + w % 900))
        for d in range(1, cfg.districts + 1):
            cluster.bulk_put(metas[f"district@{s}"], district_key(w, d), _DISTRICT.pack(1, 0, 500 + d))
            for c in range(1, cfg.customers_per_district + 1):
                ck = customer_key(w, d, c)
                cluster.bulk_put(metas[f"customer@{s}"], ck, _CUSTOMER.pack(0, 0, 0, customer_name(ck)))
                name_index.insert(name_attr(customer_name(ck)), ck)
        for i in range(1, cfg.items + 1):
            cluster.bulk_put(metas[f"stock@{s}"], stock_key(w, i), _STOCK.pack(100, 0, 0))
    cluster.finish_load()


def _meta(cluster: Cluster, name: str):
    from .txn import _table_meta

    return _table_meta(cluster.computes[0].catalog.resolve(name))


def rebuild_secondary_indexes(cluster: Cluster) -> None:
    """Post-restore hook: derive customer_name and order_idx from table data."""
    from .index import BPlusTree, BTreeMeta

    names = sorted(
        n for svc in cluster.catalog_services.values() for n in svc.objects
    )
    name_index = SecondaryHashIndex(cluster.fabric, _meta(cluster, "customer_name"))
    for n in names:
        if n.startswith("customer@"):
            for key, addr in cluster.table_items(_meta(cluster, n)):
                name_index.insert(name_attr(customer_name(key)), key)
    entry = cluster.computes[0].catalog.resolve("order_idx")
    tree = BPlusTree(cluster.fabric, BTreeMeta(entry["name"], tuple(entry["bounds"]),
                                               tuple(entry["servers"]), entry["order"]))
    for n in names:
        if n.startswith("order@"):
            for key, addr in cluster.table_items(_meta(cluster, n)):
                tree.insert(key, key)


# -- workload generation --


class WorkloadGen:
    def __init__(self, cfg: BenchConfig, cluster: Cluster, thread_index: int, home_w: int):
        self.cfg = cfg
        self.cluster = cluster
        # structural draws (txn type, line count, amounts) are a separate
        # stream from key selection, so skew/dist knobs provably change only
        # which keys are touched, never the transaction shape sequence
        self.type_rng = random.Random(cfg.seed * 31 + thread_index)
        self.rng = random.Random(cfg.seed * 100003 + thread_index)
        self.home_w = home_w
        alpha = parse_skew(cfg.skew)
        self.zipf = ZipfSampler(cfg.items, alpha) if alpha is not None else None
        n_wh = cfg.n_warehouses
        home_server = self.wh_server(home_w)
        self.remote_warehouses = [w for w in range(1, n_wh + 1) if self.wh_server(w) != home_server]

    def wh_server(self, w: int) -> int:
        return home_server_of(w, self.cfg.n_warehouses, self.cfg.memory_servers)

    def pick_item(self) -> int:
        if self.zipf is not None:
            return self.zipf.sample(self.rng)
        return self.rng.randint(1, self.cfg.items)

    def next_txn(self) -> tuple[int, list]:
        if self.type_rng.random() < self.cfg.new_order_share:
            return STMT_NEW_ORDER, self.gen_new_order()
        return STMT_PAYMENT, self.gen_payment()

    def gen_new_order(self) -> list:
        cfg = self.cfg
        d = self.rng.randint(1, cfg.districts)
        c = self.rng.randint(1, cfg.customers_per_district)
        ol_cnt = self.type_rng.randint(5, _MAX_LINES)
        seen: set[int] = set()
        lines = []
        while len(lines) < ol_cnt:
            i = self.pick_item()
            if i in seen:
                continue
            seen.add(i)
            lines.append([i, self.home_w, self.rng.randint(1, 10)])
        if self.remote_warehouses and self.type_rng.random() < cfg.dist_pct / 100.0:
            which = self.rng.randrange(len(lines))
            lines[which][1] = self.rng.choice(self.remote_warehouses)
        return [self.home_w, d, c, lines]

    def gen_payment(self) -> list:
        cfg = self.cfg
        d = self.rng.randint(1, cfg.districts)
        c = self.rng.randint(1, cfg.customers_per_district)
        ck = customer_key(self.home_w, d, c)
        by_name = self.type_rng.random() < cfg.payment_by_name
        return [self.home_w, d, ck, self.type_rng.randint(1, 5000), by_name]


# -- metrics --


@dataclass
class Metrics:
    duration: float = 0.0
    committed: Counter = field(default_factory=Counter)
    aborted: Counter = field(default_factory=Counter)
    attempts: int = 0
    abort_reasons: Counter = field(default_factory=Counter)
    latencies: list = field(default_factory=list)  # (stmt, seconds), sampled
    phase_sums: Counter = field(default_factory=Counter)
    phase_count: int = 0
    series: Counter = field(default_factory=Counter)  # (second, stmt) -> commits
    verb_counts: dict = field(default_factory=dict)
    checker_violations: int | None = None

    @property
    def total_committed(self) -> int:
        return sum(self.committed.values())

    @property
    def total_aborted(self) -> int:
        return sum(self.aborted.values())

    @property
    def abort_rate(self) -> float:
        att = self.attempts
        return (att - self.total_committed) / att if att else 0.0

    def throughput(self, stmt: int | None = None) -> float:
        n = self.committed[stmt] if stmt is not None else self.total_committed
        return n / self.duration if self.duration else 0.0

    def add_outcome(self, stmt: int, outcome: Outcome, t_rel: float, latency: float) -> None:
        self.attempts += outcome.attempts
        if outcome.committed:
            self.committed[stmt] += 1
            self.abort_reasons["conflict"] += outcome.attempts - 1
            self.aborted[stmt] += outcome.attempts - 1
            if len(self.latencies) < 100_000:
                self.latencies.append((stmt, latency))
            for k, v in outcome.phases.items():
                self.phase_sums[k] += v
            self.phase_count += 1
            self.series[(int(t_rel), stmt)] += 1
        else:
            self.aborted[stmt] += outcome.attempts
            self.abort_reasons[outcome.reason or "unknown"] += outcome.attempts

    def merge(self, other: "Metrics") -> None:
        self.committed.update(other.committed)
        self.aborted.update(other.aborted)
        self.attempts += other.attempts
        self.abort_reasons.update(other.abort_reasons)
        self.latencies.extend(other.latencies[: 100_000 - len(self.latencies)])
        self.phase_sums.update(other.phase_sums)
        self.phase_count += other.phase_count
        self.series.update(other.series)

    def to_json(self) -> dict:
        lat = sorted(v for _, v in self.latencies)

        def pct(p):
            return lat[min(len(lat) - 1, int(p * len(lat)))] if lat else 0.0

        return {
            "duration": self.duration,
            "committed": {str(k): v for k, v in self.committed.items()},
            "aborted": {str(k): v for k, v in self.aborted.items()},
            "attempts": self.attempts,
            "abort_rate": self.abort_rate,
            "abort_reasons": dict(self.abort_reasons),
            "new_order_tps": self.throughput(STMT_NEW_ORDER),
            "total_tps": self.throughput(),
            "latency_p50": pct(0.50), "latency_p95": pct(0.95), "latency_p99": pct(0.99),
            "phase_avg": {
                k: (v / self.phase_count if self.phase_count else 0.0)
                for k, v in sorted(self.phase_sums.items())
            },
            "verb_counts": self.verb_counts,
            "checker_violations": self.checker_violations,
        }

    def write_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("second,stmt,committed\n")
            for (sec, stmt), n in sorted(self.series.items()):
                f.write(f"{sec},{stmt},{n}\n")


# -- harness --


def build_cluster(cfg: BenchConfig) -> Cluster:
    cfg.validate()
    cluster = Cluster(cfg.cluster_config())
    n_wh, m = cfg.n_warehouses, cfg.memory_servers
    cluster.register_statement(STMT_NEW_ORDER, lambda ops, p: new_order(ops, p, n_wh, m))
    cluster.register_statement(STMT_PAYMENT, lambda ops, p: payment(ops, p, n_wh, m))
    return cluster


def run_benchmark(cfg: BenchConfig, cluster: Cluster | None = None, keep_cluster: bool = False):
    """Boot, load, run the mix, and collect metrics (+ optional checking)."""
    owned = cluster is None
    if cluster is None:
        cluster = build_cluster(cfg)
        load_schema(cluster, cfg)
    del owned
    cluster.start()
    try:
        metrics = _run_threads(cfg, cluster)
    finally:
        cluster.stop()
    metrics.verb_counts = {
        str(sid): dict(cluster.fabric.server(sid).verb_counts) for sid in cluster.memory_ids
    }
    events = None
    if cluster.events is not None:
        events = cluster.events.snapshot()
    if cfg.check and events is not None:
        metrics.checker_violations = len(check_gsi(events))
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "metrics.json"), "w") as f:
            json.dump(metrics.to_json(), f, indent=2, sort_keys=True)
        metrics.write_csv(os.path.join(cfg.out_dir, "series.csv"))
        if events is not None:
            dump_events(events, os.path.join(cfg.out_dir, "events.log"))
    if keep_cluster:
        return metrics, events, cluster
    return metrics, events


def _run_threads(cfg: BenchConfig, cluster: Cluster) -> Metrics:
    n_threads = len(cluster.threads)
    n_wh = cfg.n_warehouses
    per_thread = [Metrics() for _ in range(n_threads)]
    limit = cfg.txn_limit
    issued = [0]
    issue_lock = threading.Lock()
    start_gate = threading.Barrier(n_threads + 1)
    stop_flag = threading.Event()
    t_start = [0.0]

    def worker(idx: int):
        thread = cluster.threads[idx]
        if cfg.locality and thread.compute.co_located is not None:
            # home warehouse on the co-located memory server
            local = [w for w in range(1, n_wh + 1)
                     if home_server_of(w, n_wh, cfg.memory_servers) == thread.compute.co_located]
            home_w = local[idx % len(local)] if local else (idx % n_wh) + 1
        else:
            home_w = (idx % n_wh) + 1
        gen = WorkloadGen(cfg, cluster, idx, home_w)
        m = per_thread[idx]
        start_gate.wait()
        while not stop_flag.is_set() and not cluster.halted:
            if limit is not None:
                with issue_lock:
                    if issued[0] >= limit:
                        break
                    issued[0] += 1
            stmt, params = gen.next_txn()
            t0 = time.perf_counter()
            outcome = thread.execute(stmt, params)
            t1 = time.perf_counter()
            m.add_outcome(stmt, outcome, t1 - t_start[0], t1 - t0)
            if limit is None and t1 - t_start[0] >= cfg.duration:
                break

    threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(n_threads)]
    for t in threads:
        t.start()
    t_start[0] = time.perf_counter()
    start_gate.wait()
    if limit is None:
        if cfg.duration > 0:
            stop_flag.wait(cfg.duration)
        stop_flag.set()
    for t in threads:
        t.join()
    stop_flag.set()
    total = Metrics()
    total.duration = max(time.perf_counter() - t_start[0], 1e-9)
    for m in per_thread:
        total.merge(m)
    return total


def run_oracle_microbench(cfg: BenchConfig) -> dict:
    """Closed t-trx loop: read snapshot, mint commit timestamp, publish."""
    cfg.validate()
    cluster = Cluster(cfg.cluster_config())
    cluster.start()
    n_threads = len(cluster.threads)
    counts = [0] * n_threads
    per_limit = (cfg.txn_limit // n_threads) if cfg.txn_limit else None
    start_gate = threading.Barrier(n_threads + 1)
    stop_flag = threading.Event()

    def worker(idx: int):
        thread = cluster.threads[idx]
        n = 0
        start_gate.wait()
        while not stop_flag.is_set():
            rts = thread.snapshot()
            if cfg.capture_events:
                thread.txn_seq += 1
                thread.emit("begin", vector=rts)
            cts = thread.next_commit(rts)
            thread.publish(cts, committed=True)
            n += 1
            if per_limit is not None and n >= per_limit:
                break
        counts[idx] = n

    threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(n_threads)]
    for t in threads:
        t.start()
    start_gate.wait()
    t0 = time.perf_counter()
    if per_limit is None:
        stop_flag.wait(cfg.duration)
        stop_flag.set()
    for t in threads:
        t.join()
    elapsed = max(time.perf_counter() - t0, 1e-9)
    events = cluster.events.snapshot() if (cluster.events and cfg.capture_events) else None
    result = {
        "threads": n_threads,
        "t_trx": sum(counts),
        "t_trx_per_sec": sum(counts) / elapsed,
        "per_thread": counts,
        "elapsed": elapsed,
        "final_vector": list(cluster.current_vector()) if cluster.vector is not None else None,
        "final_rts": cluster.naive.get_rts() if cluster.naive is not None else None,
    }
    cluster.stop()
    if events is not None:
        result["events"] = events
    return result
