"""Command-line entry point: ``skyline2pc <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, client
from .dealer import OnDemandDealer, gen_correlations, query_budget, write_correlations
from .engine import run_sessions
from .errors import BudgetExhaustedError, Skyline2PCError
from .oracle import PlainQuery, as_multiset, bnl_skyline
from .server import ServerConfig, parse_addr, query_servers, run_server
from .skyline import run_query


def _env(name: str, default=None):
    return os.environ.get(f"SKY2PC_{name}", default)


def cmd_gen_data(a) -> int:
    db = bench.gen_dataset(a.n, a.m, a.seed, a.distribution, a.high)
    client.write_csv(a.out, db)
    print(f"wrote {a.n} x {a.m} dataset to {a.out}")
    return 0


def cmd_encrypt_db(a) -> int:
    _, db = client.read_csv(a.data)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s1, s2, meta = client.encrypt_database(db, np.random.default_rng(a.seed), db_id=a.db_id)
    client.write_db_share(s1, out / "db1.bin")
    client.write_db_share(s2, out / "db2.bin")
    meta.save(out / "meta.json")
    print(f"wrote {out}/db1.bin, {out}/db2.bin and {out}/meta.json (db id {meta.db_id})")
    return 0


def cmd_deal(a) -> int:
    meta = client.PublicMetadata.load(a.meta)
    max_c = a.max_c or meta.n
    budget = query_budget(meta.n, meta.m, max_c, a.max_s or max_c, meta.ring, overprovision=a.overprovision)
    budget = budget.scaled(a.queries)
    cs = gen_correlations(budget, meta.n, meta.m, np.random.default_rng(a.seed), meta.ring)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_correlations(cs, 1, out / "corr1.bin")
    write_correlations(cs, 2, out / "corr2.bin")
    print(f"wrote correlations for {a.queries} queries: {budget.and_words} AND words, "
          f"{budget.random_bits} random bits, {budget.shuffles} shuffles")
    return 0


def cmd_gen_query(a) -> int:
    _, db = client.read_csv(a.data)
    meta = client.PublicMetadata.load(a.meta) if a.meta else None
    q = bench.gen_query(db, a.k, a.selectivity, a.seed, meta)
    client.save_query(q, a.out)
    print(f"wrote query over dims {list(q.dims)} to {a.out}")
    return 0


def cmd_serve(a) -> int:
    role = a.role or _env("ROLE")
    if role is None:
        raise SystemExit("--role is required")
    cfg = ServerConfig(
        party=1 if role.lower() == "cs1" else 2,
        db_path=a.db or _env("DB"),
        corr_path=a.corr or _env("CORR"),
        listen=parse_addr(a.listen or _env("LISTEN", "127.0.0.1:7001")),
        peer=parse_addr(a.peer or _env("PEER", "127.0.0.1:7100")),
        delay=float(a.delay if a.delay is not None else _env("DELAY", 0.0)),
        timeout=a.timeout,
        state_path=a.state or _env("STATE"),
        seed=a.seed,
    )
    if not cfg.db_path or not cfg.corr_path:
        raise SystemExit("--db and --corr are required")
    run_server(role.upper(), cfg)
    return 0


def cmd_query(a) -> int:
    meta = client.PublicMetadata.load(a.meta)
    q = client.load_query(a.query)
    q1, q2 = client.encrypt_query(client.build_query(q, meta), np.random.default_rng(a.seed), meta.ring)
    rs1, rs2, st1, st2 = query_servers(parse_addr(a.cs1), parse_addr(a.cs2), q1, q2, timeout=a.timeout)
    answer = client.decrypt_and_filter(rs1, rs2, meta.ring)
    rows = np.asarray(answer, dtype=np.uint64).reshape(-1, meta.m)
    client.write_csv(a.out or sys.stdout, rows)
    print(f"# {len(answer)} skyline tuples, |C|={st1['c_size']}, {st1['rounds']} rounds, "
          f"{st1['latency_ms']:.1f} ms", file=sys.stderr)
    return 0


def cmd_bench(a) -> int:
    spec = bench.ExperimentSpec(a.n, a.m, a.k, a.selectivity, a.trials, a.seed, a.transport, a.delay, a.dealer,
                                a.distribution, a.mode, a.workers)
    db = client.read_csv(a.data)[1] if a.data else None
    text = bench.rows_to_csv(bench.run_experiment(spec, db), spec)
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_verify(a) -> int:
    """Run the encrypted pipeline in-process and compare with the plaintext skyline."""
    rng = np.random.default_rng(a.seed)
    cases = []
    if a.data:
        _, db = client.read_csv(a.data)
        qs = [client.load_query(a.query)] if a.query else [
            bench.gen_query(db, a.k, a.selectivity, int(rng.integers(1 << 31))) for _ in range(a.instances)]
        cases = [(db, q) for q in qs]
    else:
        for _ in range(a.instances):
            n, m = int(rng.integers(1, 201)), int(rng.integers(2, 7))
            db = rng.integers(0, a.high, size=(n, m), dtype=np.uint64)
            k = int(rng.integers(1, m + 1))
            cases.append((db, _random_query(db, k, rng)))
    bad = 0
    for i, (db, q) in enumerate(cases):
        s1, s2, meta = client.encrypt_database(db, rng)
        q1, q2 = client.encrypt_query(client.build_query(q, meta), rng)
        dealer = OnDemandDealer(rng)
        (r1, _), (r2, _) = run_sessions(
            lambda s: run_query(s, (s1 if s.party == 1 else s2).data, q1 if s.party == 1 else q2, mode=a.mode)[0],
            dealer.feed(1), dealer.feed(2), seed=int(rng.integers(1 << 31)))
        if as_multiset(client.decrypt_and_filter(r1, r2)) != as_multiset(bnl_skyline(db, q)):
            bad += 1
            print(f"instance {i}: MISMATCH", file=sys.stderr)
    print(f"{len(cases) - bad}/{len(cases)} instances match the plaintext skyline")
    return 1 if bad else 0


def _random_query(db, k, rng):
    m = db.shape[1]
    dims = tuple(int(d) for d in rng.choice(m, size=k, replace=False))
    ranges = []
    for d in dims:
        a, b = sorted(int(x) for x in rng.integers(0, int(db[:, d].max()) + 2 if len(db) else 2, size=2))
        ranges.append((a, b))
    prefs = tuple(str(p) for p in rng.choice(["min", "max"], size=k))
    return PlainQuery(dims, tuple(ranges), prefs)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skyline2pc", description="two-server oblivious skyline queries")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "synthetic integer dataset as CSV")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--distribution", choices=bench.DISTRIBUTIONS, default="uniform")
    sp.add_argument("--high", type=int, default=None, help="exclusive value bound (default: whole domain)")
    sp.add_argument("--out", required=True)

    sp = add("encrypt-db", cmd_encrypt_db, "split a CSV dataset into two share files plus metadata")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--db-id", default=None)

    sp = add("deal", cmd_deal, "generate correlation files for both servers")
    sp.add_argument("--meta", required=True)
    sp.add_argument("--queries", type=int, default=1)
    sp.add_argument("--max-c", type=int, default=None, help="largest sub-database to provision for (default n)")
    sp.add_argument("--max-s", type=int, default=None, help="largest candidate window (default max-c)")
    sp.add_argument("--overprovision", type=float, default=2.0)
    sp.add_argument("--out-dir", required=True)

    sp = add("gen-query", cmd_gen_query, "random query calibrated to a selectivity")
    sp.add_argument("--data", required=True)
    sp.add_argument("--meta", default=None)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--selectivity", type=float, required=True)
    sp.add_argument("--out", required=True)

    sp = add("serve", cmd_serve, "run a CS1 or CS2 daemon (flags fall back to SKY2PC_* env vars)")
    sp.add_argument("--role", choices=["cs1", "cs2", "CS1", "CS2"])
    sp.add_argument("--db")
    sp.add_argument("--corr")
    sp.add_argument("--listen", help="client address host:port")
    sp.add_argument("--peer", help="CS1: peer listen address; CS2: CS1's peer address")
    sp.add_argument("--delay", type=float, default=None, help="injected one-way peer delay in seconds")
    sp.add_argument("--timeout", type=float, default=60.0)
    sp.add_argument("--state", help="file recording spent correlation material")

    sp = add("query", cmd_query, "encrypt a query, run it on both servers, print the skyline")
    sp.add_argument("--meta", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--cs1", required=True)
    sp.add_argument("--cs2", required=True)
    sp.add_argument("--timeout", type=float, default=60.0)
    sp.add_argument("--out", default=None)

    sp = add("bench", cmd_bench, "end-to-end measurements as CSV")
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--m", type=int, default=5)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--selectivity", type=float, default=0.001)
    sp.add_argument("--trials", type=int, default=1)
    sp.add_argument("--transport", choices=["memory", "tcp"], default="memory")
    sp.add_argument("--delay", type=float, default=0.001, help="one-way link delay in seconds")
    sp.add_argument("--dealer", choices=["auto", "pool", "online"], default="auto")
    sp.add_argument("--distribution", choices=bench.DISTRIBUTIONS, default="uniform")
    sp.add_argument("--mode", choices=["lookahead", "literal"], default="lookahead")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--data", default=None, help="use this CSV instead of generating a dataset")
    sp.add_argument("--out", default=None)

    sp = add("verify", cmd_verify, "cross-check the encrypted pipeline against the plaintext skyline")
    sp.add_argument("--data", default=None)
    sp.add_argument("--query", default=None)
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--k", type=int, default=2)
    sp.add_argument("--selectivity", type=float, default=0.1)
    sp.add_argument("--high", type=int, default=16, help="value range of random instances")
    sp.add_argument("--mode", choices=["lookahead", "literal"], default="lookahead")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.cmd == "serve" else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except BudgetExhaustedError as exc:
        print(f"error: {exc}\nconsumed so far: {exc.consumed}", file=sys.stderr)
        return 3
    except (Skyline2PCError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
