"""Command-line harness: `fabdb-bench run | oracle | replay`.

Exit status is nonzero when checking is enabled and the checker reports any
violation, so CI scripts can gate on it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

from .bench import BenchConfig, run_benchmark, run_oracle_microbench
from .fabric import LatencyProfile


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--memory-servers", type=int, default=2)
    p.add_argument("--compute-servers", type=int, default=2)
    p.add_argument("--threads", type=int, default=4, help="execution threads per compute server")
    p.add_argument("--oracle", choices=("naive", "vector"), default="vector")
    p.add_argument("--opt", action="append", default=[],
                   help="oracle optimization: fetch-thread | compress | partitions=K")
    p.add_argument("--duration", type=float, default=2.0, help="seconds")
    p.add_argument("--txns", type=int, default=None, help="stop after this many transactions")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--latency", default=None,
                   help="JSON latency profile, e.g. '{\"read_base\":0.001}'")


def _apply_opts(cfg: BenchConfig, opts: list[str]) -> None:
    for opt in opts:
        if opt == "fetch-thread":
            cfg.fetch_thread = True
        elif opt == "compress":
            cfg.compress = True
        elif opt.startswith("partitions="):
            cfg.partitions = int(opt.split("=", 1)[1])
        else:
            raise SystemExit(f"unknown --opt {opt!r}")


def _latency(arg: str | None) -> LatencyProfile:
    if not arg:
        return LatencyProfile()
    return LatencyProfile(**json.loads(arg))


def cmd_run(args) -> int:
    cfg = BenchConfig(
        memory_servers=args.memory_servers,
        compute_servers=args.compute_servers,
        threads_per_server=args.threads,
        warehouses=args.warehouses,
        items=args.items,
        dist_pct=args.dist_pct,
        skew=args.skew,
        oracle=args.oracle,
        duration=args.duration,
        txn_limit=args.txns,
        seed=args.seed,
        locality=args.locality == "on",
        check=args.check == "on",
        latency=_latency(args.latency),
        out_dir=args.out,
    )
    _apply_opts(cfg, args.opt)
    metrics, _ = run_benchmark(cfg)
    summary = metrics.to_json()
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    print()
    if cfg.check and metrics.checker_violations:
        print(f"CHECKER: {metrics.checker_violations} violations", file=sys.stderr)
        return 1
    return 0


def cmd_oracle(args) -> int:
    cfg = BenchConfig(
        memory_servers=args.memory_servers,
        compute_servers=args.compute_servers,
        threads_per_server=args.threads,
        oracle=args.oracle,
        duration=args.duration,
        txn_limit=args.txns,
        seed=args.seed,
        latency=_latency(args.latency),
    )
    _apply_opts(cfg, args.opt)
    result = run_oracle_microbench(cfg)
    result.pop("events", None)
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def cmd_replay(args) -> int:
    """Deterministic crash/recovery demonstration: run a seeded workload,
    checkpoint, crash, recover from journals, and compare state hashes."""
    from . import recovery
    from .bench import build_cluster, load_schema, rebuild_secondary_indexes

    out_dir = args.journal
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "checkpoint.bin")

    def run(crash_at: int | None):
        cfg = BenchConfig(memory_servers=2, compute_servers=1, threads_per_server=1,
                          warehouses=2, items=100, seed=args.seed, capture_events=False)
        cluster = build_cluster(cfg)
        load_schema(cluster, cfg)
        cluster.start()
        gen_rng_cfg = BenchConfig(**{**cfg.__dict__})
        thread = cluster.threads[0]
        from .bench import WorkloadGen
        gen = WorkloadGen(gen_rng_cfg, cluster, 0, 1)
        txns = [gen.next_txn() for _ in range(args.txns or 100)]
        for i, (stmt, params) in enumerate(txns):
            if i == (args.txns or 100) // 2:
                recovery.write_checkpoint(cluster, ckpt)
            if crash_at is not None and i == crash_at:
                cluster.stop()
                cluster.simulate_memory_crash()
                recovery.recover(cluster, ckpt, rebuild_secondary_indexes)
                cluster.start()
                resume = cluster.threads[0].writer.local_t
                for stmt2, params2 in txns[resume:]:
                    thread.execute(stmt2, params2)
                break
            thread.execute(stmt, params)
        cluster.stop()
        h = cluster.state_hash()
        return h

    reference = run(None)
    recovered = run((args.txns or 100) * 3 // 4)
    report = {"reference_hash": reference, "recovered_hash": recovered,
              "equal": reference == recovered}
    json.dump(report, sys.stdout, indent=2)
    print()
    return 0 if report["equal"] else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fabdb-bench")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="TPC-C-lite benchmark")
    _add_common(p_run)
    p_run.add_argument("--warehouses", type=int, default=None)
    p_run.add_argument("--items", type=int, default=1000)
    p_run.add_argument("--dist-pct", type=int, default=10)
    p_run.add_argument("--skew", default="uniform", help="uniform | zipf:ALPHA")
    p_run.add_argument("--locality", choices=("on", "off"), default="off")
    p_run.add_argument("--check", choices=("on", "off"), default="off")
    p_run.set_defaults(fn=cmd_run)

    p_oracle = sub.add_parser("oracle", help="timestamp-oracle microbenchmark")
    _add_common(p_oracle)
    p_oracle.set_defaults(fn=cmd_oracle)

    p_replay = sub.add_parser("replay", help="crash/recovery demonstration")
    p_replay.add_argument("--journal", default=tempfile.mkdtemp(prefix="fabdb-replay-"))
    p_replay.add_argument("--txns", type=int, default=100)
    p_replay.add_argument("--seed", type=int, default=1)
    p_replay.set_defaults(fn=cmd_replay)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
