"""Sets of system matrices consistent with noisy input-state data.

Each transition ``(x_i, u_i, x_{i+1})`` contributes a quadratic matrix
inequality ``[I A B] D_i [I A B]' >= 0`` whose middle matrix is
``D_i = V_i diag(G^-1, -1) V_i'`` with ``V_i = [[I, x_{i+1}], [0, -x_i], [0, -u_i]]``.
For a given ``(A, B)`` this evaluates to ``G^-1 - r r'`` where ``r`` is the
implied residual, so membership reduces to ``|r|_G <= 1`` per sample.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import DimError, NotPsd, PSD_TOL, as_sym, is_pd


class NotInSet(ValueError):
    """Reference model is not in the consistency set."""


class BlockSource(enum.Enum):
    OFFLINE = "offline"
    ONLINE = "online"


class MultiplierMode(enum.Enum):
    FULL_MULTIPLIERS = "full"
    COMMON_MULTIPLIER = "common"


def qmi_matrix(x_next, x, u, G_inv):
    n, m = x.size, u.size
    V = np.zeros((2 * n + m, n + 1))
    V[:n, :n] = np.eye(n)
    V[:n, n] = x_next
    V[n:2 * n, n] = -x
    V[2 * n:, n] = -u
    mid = np.zeros((n + 1, n + 1))
    mid[:n, :n] = G_inv
    mid[n, n] = -1.0
    D = V @ mid @ V.T
    return 0.5 * (D + D.T)


@dataclass(frozen=True)
class QmiBlock:
    D: np.ndarray
    source: BlockSource
    sample_index: int
    x_next: np.ndarray
    x: np.ndarray
    u: np.ndarray
    G_inv: np.ndarray

    @classmethod
    def from_sample(cls, x_next, x, u, G, source, index):
        x_next, x, u = (np.atleast_1d(np.asarray(v, dtype=float)).ravel() for v in (x_next, x, u))
        G = as_sym(G)
        if x_next.size != x.size or G.shape[0] != x.size:
            raise DimError("state and noise-bound dimensions disagree")
        if not is_pd(G, 0.0):
            raise NotPsd("G must be positive definite")
        G_inv = as_sym(np.linalg.inv(G))
        return cls(qmi_matrix(x_next, x, u, G_inv), BlockSource(source), int(index),
                   x_next, x, u, G_inv)

    def rebuild(self):
        return qmi_matrix(self.x_next, self.x, self.u, self.G_inv)


@dataclass(frozen=True)
class ConsistencySet:
    blocks: tuple
    n: int
    m: int
    mode: MultiplierMode = MultiplierMode.FULL_MULTIPLIERS

    @property
    def offline(self):
        return tuple(b for b in self.blocks if b.source is BlockSource.OFFLINE)

    @property
    def online(self):
        return tuple(b for b in self.blocks if b.source is BlockSource.ONLINE)

    def with_mode(self, mode):
        return ConsistencySet(self.blocks, self.n, self.m, MultiplierMode(mode))

    def multiplier_blocks(self):
        """Offline and online matrices as they enter the multiplier LMI.

        In common-multiplier mode the offline blocks collapse into their sum.
        """
        off = [b.D for b in self.offline]
        if self.mode is MultiplierMode.COMMON_MULTIPLIER and off:
            off = [sum(off)]
        return off, [b.D for b in self.online]

    def evaluate(self, A, B):
        """Stack of ``[I A B] D_i [I A B]'`` over all blocks."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if A.shape != (self.n, self.n) or B.shape != (self.n, self.m):
            raise DimError(f"expected A {self.n}x{self.n} and B {self.n}x{self.m}")
        W = np.hstack([np.eye(self.n), A, B])
        Ds = np.stack([b.D for b in self.blocks])
        return np.einsum("ij,tjk,lk->til", W, Ds, W)


def build_offline(data, mode=MultiplierMode.FULL_MULTIPLIERS):
    if data.T < 1:
        raise ValueError("need at least one transition")
    blocks = tuple(
        QmiBlock.from_sample(data.X[:, i + 1], data.X[:, i], data.U[:, i], data.G,
                             BlockSource.OFFLINE, i)
        for i in range(data.T)
    )
    return ConsistencySet(blocks, data.n, data.m, MultiplierMode(mode))


def push_online(cset, x_t, u_t, x_next, G=None):
    """New set with one more online block for the triple ``(x_t, u_t, x_next)``."""
    x_t, u_t = np.atleast_1d(x_t), np.atleast_1d(u_t)
    if x_t.size != cset.n or u_t.size != cset.m or np.size(x_next) != cset.n:
        raise DimError("online triple does not match the set dimensions")
    if G is None:
        G = np.linalg.inv(cset.blocks[0].G_inv)
    k = len(cset.online)
    block = QmiBlock.from_sample(x_next, x_t, u_t, G, BlockSource.ONLINE, k)
    return ConsistencySet(cset.blocks + (block,), cset.n, cset.m, cset.mode)


def is_member(cset, A, B, tol=PSD_TOL):
    M = cset.evaluate(A, B)
    return bool(np.linalg.eigvalsh(M)[:, 0].min() >= -tol)


def _max_step(cset, center, direction, tol, limit=1e6):
    """Largest ``s`` (up to ``limit``) with ``center + s*direction`` in the set."""
    A0, B0 = center
    n = cset.n

    def inside(s):
        Z = s * direction
        return is_member(cset, A0 + Z[:, :n], B0 + Z[:, n:], tol)

    lo, hi = 0.0, 1e-8
    while inside(hi):
        lo, hi = hi, 4.0 * hi
        if hi > limit:
            return limit
    while hi - lo > 0.005 * hi:
        mid = 0.5 * (lo + hi)
        if inside(mid):
            lo = mid
        else:
            hi = mid
    return lo


def sample_members(cset, center, count, seed, boundary_fraction=0.5, tol=0.0):
    """Draw ``count`` members around ``center``.

    Each draw picks a Gaussian direction and bisects the distance to the
    set boundary. A ``boundary_fraction`` share of draws is placed within
    1% of the boundary; the rest uniformly along the segment.
    """
    A0 = np.atleast_2d(np.asarray(center[0], dtype=float))
    B0 = np.atleast_2d(np.asarray(center[1], dtype=float))
    if not is_member(cset, A0, B0, tol):
        raise NotInSet("center is not consistent with the data")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        d = rng.standard_normal((cset.n, cset.n + cset.m))
        d /= np.linalg.norm(d)
        s_max = _max_step(cset, (A0, B0), d, tol)
        if rng.uniform() < boundary_fraction:
            s = s_max * rng.uniform(0.99, 1.0)
        else:
            s = s_max * rng.uniform()
        Z = s * d
        A, B = A0 + Z[:, :cset.n], B0 + Z[:, cset.n:]
        if is_member(cset, A, B, tol):
            out.append((A, B))
    return out
