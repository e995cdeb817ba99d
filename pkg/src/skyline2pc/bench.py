"""Synthetic data, selectivity-calibrated queries and end-to-end measurements.

Every trial decrypts its answer and compares it with the plaintext skyline; a
mismatch aborts the experiment.  Reported byte and round counts come straight
from the session counters, which are checked against the transport counters.
"""

from __future__ import annotations

import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .client import PublicMetadata, build_query, decrypt_and_filter, encrypt_database, encrypt_query
from .dealer import OnDemandDealer, gen_correlations, query_budget
from .engine import run_sessions
from .errors import CalibrationError, OracleMismatchError
from .oracle import PlainQuery, as_multiset, bnl_skyline
from .ring import RING64, Ring
from .skyline import run_query
from .transport import inmem_transport_pair, socket_pair

DISTRIBUTIONS = ("uniform", "correlated", "anticorrelated")
CSV_COLUMNS = ("trial", "n", "m", "k", "selectivity", "latency_ms", "bytes_cs1_to_cs2", "bytes_cs2_to_cs1",
               "c_size", "s_size", "rounds")
# above this many bytes of pool material per query the pool dealer is replaced by the online one
POOL_LIMIT_BYTES = 1 << 30


def gen_dataset(n: int, m: int, seed: int | None = None, distribution: str = "uniform", high: int | None = None,
                ring: Ring = RING64) -> np.ndarray:
    """n x m integer table on [0, high) (default: the whole value domain), reproducible by seed."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be at least 1")
    high = ring.value_bound if high is None else int(high)
    if not 1 <= high <= ring.value_bound:
        raise ValueError(f"high must lie in [1, {ring.value_bound}]")
    rng = np.random.default_rng(seed)
    if distribution == "uniform":
        return rng.integers(0, high, size=(n, m), dtype=np.uint64)
    if distribution not in DISTRIBUTIONS:
        raise ValueError(f"unknown distribution {distribution!r}")
    # unit-cube generators, then scaled to the integer domain
    if distribution == "correlated":
        centre = rng.random(n)[:, None]
        u = centre + rng.normal(0.0, 0.05, size=(n, m))
    else:
        plane = rng.normal(0.5, 0.05, size=n)[:, None]
        w = rng.dirichlet(np.ones(m), size=n)
        u = plane + (w - 1.0 / m) * min(1.0, m / 2)
    u = np.clip(u, 0.0, np.nextafter(1.0, 0.0))
    return np.minimum((u * high).astype(np.float64), high - 1).astype(np.uint64)


def gen_query(db, k: int, selectivity: float, seed: int | None = None, meta: PublicMetadata | None = None,
              tolerance: float = 0.2, max_iter: int = 80, max_seeds: int = 25) -> PlainQuery:
    """Random k dimensions and preferences with a region holding ~selectivity of the rows.

    The region is a box of equal half-width around a random row, clipped to the
    public bounds; the half-width is found by bisection until the in-region
    fraction is within ``tolerance`` (relative) of the target.
    """
    db = np.asarray(db, dtype=np.uint64)
    n, m = db.shape
    if not 0 < selectivity <= 1:
        raise ValueError("selectivity must lie in (0, 1]")
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}]")
    meta = meta or PublicMetadata.default(n, m)
    rng = np.random.default_rng(seed)
    dims = tuple(sorted(int(d) for d in rng.choice(m, size=k, replace=False)))
    prefs = tuple(str(p) for p in rng.choice(["min", "max"], size=k))
    lo_b = np.array([meta.lower[d] for d in dims], dtype=object)
    hi_b = np.array([meta.upper[d] for d in dims], dtype=object)
    if selectivity >= 1.0:
        return PlainQuery(dims, tuple(zip(lo_b.tolist(), hi_b.tolist())), prefs)

    cols = db[:, list(dims)].astype(object)
    target = selectivity * n
    lo_ok, hi_ok = (1 - tolerance) * target, (1 + tolerance) * target
    span = max(int(h) - int(l) for l, h in zip(lo_b, hi_b))
    for _ in range(max_seeds):
        centre = cols[int(rng.integers(n))]

        def box(w):
            lo = np.maximum(centre - w, lo_b)
            hi = np.minimum(centre + w, hi_b)
            return lo, hi, int(((cols >= lo) & (cols <= hi)).all(axis=1).sum())

        a, b = 0, span
        for _ in range(max_iter):
            w = (a + b) // 2
            lo, hi, count = box(w)
            if lo_ok <= count <= hi_ok:
                return PlainQuery(dims, tuple(zip((int(x) for x in lo), (int(x) for x in hi))), prefs)
            if count < lo_ok:
                a = w + 1
            else:
                b = w - 1
            if a > b:
                break
    raise CalibrationError(f"no region with selectivity {selectivity} +/- {tolerance:.0%} after {max_seeds} attempts")


@dataclass
class ExperimentSpec:
    n: int
    m: int
    k: int
    selectivity: float
    trials: int = 1
    seed: int = 0
    transport: str = "memory"  # or "tcp"
    delay: float = 0.0  # one-way link delay in seconds
    dealer: str = "auto"  # "pool", "online" or "auto"
    distribution: str = "uniform"
    mode: str = "lookahead"
    workers: int = 1  # >1 runs trials in parallel processes (correctness sweeps only)

    def __post_init__(self) -> None:
        if not 0 < self.selectivity <= 1:
            raise ValueError("selectivity must lie in (0, 1]")
        if not 1 <= self.k <= self.m:
            raise ValueError("need 1 <= k <= m")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.transport not in ("memory", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.dealer not in ("auto", "pool", "online"):
            raise ValueError(f"unknown dealer {self.dealer!r}")


def _correlations(spec: ExperimentSpec, n: int, m: int, rng: np.random.Generator, ring: Ring):
    max_c = max(1, math.ceil((1 + 0.2) * spec.selectivity * n))
    budget = query_budget(n, m, max_c, max_c, ring, overprovision=1.0)
    kind = spec.dealer
    if kind == "auto":
        kind = "pool" if budget.and_words * 8 * 3 <= POOL_LIMIT_BYTES else "online"
    if kind == "pool":
        cs = gen_correlations(budget, n, m, rng, ring, check=False)
        return cs.party_view(1), cs.party_view(2)
    dealer = OnDemandDealer(rng, ring)
    return dealer.feed(1), dealer.feed(2)


def run_trial(db: np.ndarray, q: PlainQuery, spec: ExperimentSpec, seed, ring: Ring = RING64) -> dict:
    """One encrypted query end to end; returns a CSV row as a dict."""
    rng = np.random.default_rng(seed)
    n, m = db.shape
    s1, s2, meta = encrypt_database(db, rng, ring)
    q1, q2 = encrypt_query(build_query(q, meta), rng, ring)
    c1, c2 = _correlations(spec, n, m, rng, ring)
    if spec.transport == "tcp":
        chans = socket_pair(delay=spec.delay)
    else:
        chans = inmem_transport_pair(delay=spec.delay)

    def body(sess):
        share, qs = (s1, q1) if sess.party == 1 else (s2, q2)
        return run_query(sess, share.data, qs, mode=spec.mode)

    t0 = time.perf_counter()
    ((r1, st1), sess1), ((r2, st2), sess2) = run_sessions(body, c1, c2, ring=ring, seed=rng.integers(1 << 62),
                                                           channels=chans)
    latency = time.perf_counter() - t0
    for ch in chans:
        ch.close()
    if sess1.bytes_sent != chans[0].stats.bytes_sent or sess2.bytes_sent != chans[1].stats.bytes_sent:
        raise OracleMismatchError("session byte counters disagree with the transport counters")
    got = as_multiset(decrypt_and_filter(r1, r2, ring))
    want = as_multiset(bnl_skyline(db, q))
    if got != want:
        raise OracleMismatchError(f"encrypted answer has {len(got)} tuples, plaintext skyline has {len(want)}")
    return {
        "n": n, "m": m, "k": q.k, "selectivity": spec.selectivity,
        "latency_ms": 1000 * latency,
        "bytes_cs1_to_cs2": sess1.bytes_sent,
        "bytes_cs2_to_cs1": sess2.bytes_sent,
        "c_size": st1.c_size, "s_size": st1.s_size, "rounds": st1.rounds,
    }


def _trial_job(args):
    db, q, spec, seed = args
    return run_trial(db, q, spec, seed)


def run_experiment(spec: ExperimentSpec, db=None) -> list[dict]:
    """Trials over one dataset with a fresh calibrated query each; last row is the mean."""
    ss = np.random.SeedSequence(spec.seed)
    data_seed, *trial_seeds = ss.generate_state(1 + 2 * spec.trials)
    if db is None:
        db = gen_dataset(spec.n, spec.m, int(data_seed), spec.distribution)
    db = np.asarray(db, dtype=np.uint64)
    jobs = []
    for t in range(spec.trials):
        q = gen_query(db, spec.k, spec.selectivity, int(trial_seeds[2 * t]))
        jobs.append((db, q, spec, int(trial_seeds[2 * t + 1])))
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            rows = list(pool.map(_trial_job, jobs))
    else:
        rows = [_trial_job(j) for j in jobs]
    for i, r in enumerate(rows):
        r["trial"] = i
    summary = {c: float(np.mean([r[c] for r in rows])) for c in CSV_COLUMNS if c not in ("trial",)}
    summary.update(trial="mean", n=db.shape[0], m=db.shape[1], k=spec.k, selectivity=spec.selectivity)
    return rows + [summary]


def rows_to_csv(rows: list[dict], spec: ExperimentSpec | None = None) -> str:
    out = io.StringIO()
    if spec is not None:
        out.write(f"# spec: {json.dumps(asdict(spec))}\n")
    out.write(",".join(CSV_COLUMNS) + "\n")
    for r in rows:
        out.write(",".join(_fmt(r[c]) for c in CSV_COLUMNS) + "\n")
    return out.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)
