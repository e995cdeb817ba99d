from __future__ import annotations

import numpy as np

from skyline2pc.client import build_query, encrypt_database, encrypt_query
from skyline2pc.dealer import OnDemandDealer
from skyline2pc.engine import run_sessions
from skyline2pc.oracle import PlainQuery
from skyline2pc.ring import RING64
from skyline2pc.transport import inmem_transport_pair, socket_pair


def channels(transport: str = "memory", delay: float = 0.0, record: bool = False):
    if transport == "tcp":
        return socket_pair(delay=delay, record=record)
    return inmem_transport_pair(delay=delay, record=record)


def two_party(body, *, dealer_seed=0, seed=0, ring=RING64, transport="memory", delay=0.0, record=False,
              record_openings=False, corr=None):
    """Run body(sess) for both parties; returns ((r1, s1), (r2, s2))."""
    if corr is None:
        d = OnDemandDealer(dealer_seed, ring)
        corr = (d.feed(1), d.feed(2))
    return run_sessions(body, *corr, ring=ring, seed=seed, channels=channels(transport, delay, record),
                        record_openings=record_openings)


def pick(sess, a, b):
    return a if sess.party == 1 else b


def encrypted_instance(db, q: PlainQuery, rng):
    s1, s2, meta = encrypt_database(db, rng)
    q1, q2 = encrypt_query(build_query(q, meta), rng)
    return (s1, s2), (q1, q2), meta


def random_query(db, k, rng, widen: float | None = None) -> PlainQuery:
    """Random k dims, random prefs, random per-dim ranges over the observed values."""
    db = np.asarray(db)
    m = db.shape[1]
    dims = tuple(int(d) for d in rng.choice(m, size=k, replace=False))
    top = int(db.max()) + 1 if db.size else 1
    ranges = []
    for _ in dims:
        if widen is not None:
            a = int(rng.integers(0, max(1, int(top * (1 - widen)) + 1)))
            ranges.append((a, a + int(top * widen)))
        else:
            a, b = sorted(int(x) for x in rng.integers(0, top + 1, size=2))
            ranges.append((a, b))
    prefs = tuple(str(p) for p in rng.choice(["min", "max"], size=k))
    return PlainQuery(dims, tuple(ranges), prefs)
