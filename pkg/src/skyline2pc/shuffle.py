"""Two-message oblivious shuffle of a secret-shared matrix.

CS2 masks its share and sends it to CS1, CS1 permutes by its own permutation
and re-masks, CS2 permutes by its permutation and corrects with Delta.  The
output is a fresh sharing of the rows permuted by pi2 after pi1; neither
server learns the composition.
"""

from __future__ import annotations

import numpy as np

from .dealer import ShuffleHalf, apply_perm
from .engine import Session
from .errors import DesyncError
from .ring import U64
from .transport import MsgType


def obli_shuff(sess: Session, share: np.ndarray, corr: ShuffleHalf | None = None) -> np.ndarray:
    """Return this party's share of the shuffled matrix.

    ``corr`` defaults to the next shuffle correlation of the session's source.
    """
    ring = sess.ring
    share = np.asarray(share, dtype=U64)
    if share.ndim != 2:
        raise ValueError("database share must be an n x m matrix")
    n, m = share.shape
    if corr is None:
        corr = sess.corr.shuffle(n, m)
    if (corr.n, corr.m) != (n, m):
        raise ValueError(f"shuffle correlation is for {corr.n}x{corr.m}, database is {n}x{m}")
    if corr.party != sess.party:
        raise ValueError("shuffle correlation belongs to the other party")
    corr.take()

    if sess.party == 2:
        z2 = ring.reduce(share - corr.mask)
        sess.send_oneway(MsgType.SHUFFLE_Z2, z2.astype("<u8").tobytes(), "shuffle_z2")
        buf = sess.recv_oneway(MsgType.SHUFFLE_Z1, "shuffle_z1")
        z1 = _matrix(buf, n, m)
        return ring.reduce(apply_perm(z1, corr.perm) + corr.extra)

    buf = sess.recv_oneway(MsgType.SHUFFLE_Z2, "shuffle_z2")
    z2 = _matrix(buf, n, m)
    z1 = ring.reduce(apply_perm(ring.reduce(z2 + share), corr.perm) - corr.mask)
    sess.send_oneway(MsgType.SHUFFLE_Z1, z1.astype("<u8").tobytes(), "shuffle_z1")
    return corr.extra.copy()


def _matrix(buf: bytes, n: int, m: int) -> np.ndarray:
    if len(buf) != 8 * n * m:
        raise DesyncError(f"shuffle message of {len(buf)} bytes, expected {8 * n * m}")
    return np.frombuffer(buf, dtype="<u8").astype(U64).reshape(n, m)
