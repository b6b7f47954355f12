"""Limited-memory BFGS preconditioning built from CG iterate snapshots.

Curvature pairs (s, y) are differences of consecutive CG iterates and of the
quadratic's gradients at them, taken at positions spread evenly over the
run. The two-loop recursion then applies the implied inverse-Hessian
approximation in O(m n) per vector, which is what the flexible CG solver
uses as M^{-1}.
"""

import math
from dataclasses import dataclass

import numpy as np

from .krylov import Preconditioner

ADMIT_REL_THRESHOLD = 1e-10  # pair kept iff y.s > threshold * |y| * |s|


@dataclass
class CurvaturePair:
    s: np.ndarray  # iterate difference x_{i+1} - x_i
    y: np.ndarray  # gradient difference at those iterates
    rho: float  # 1 / (y.s)


def admissible(s, y):
    ys = float(y @ s)
    return ys > ADMIT_REL_THRESHOLD * float(np.linalg.norm(y)) * float(np.linalg.norm(s))


def make_pair(s, y):
    """CurvaturePair for an admissible (s, y), else None."""
    if not admissible(s, y):
        return None
    return CurvaturePair(s, y, 1.0 / float(y @ s))


class LbfgsMemory:
    """FIFO store of at most ``capacity`` admitted pairs plus the H0 scaling.

    gamma = (y.s)/(y.y) of the newest pair scales the initial inverse
    Hessian H0 = gamma*I; with no pairs the memory acts as the identity.
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.pairs = []
        self.gamma = 1.0

    def __len__(self):
        return len(self.pairs)

    def admit(self, pair_or_s, y=None):
        """Append a pair if admissible, evicting the oldest beyond capacity."""
        pair = pair_or_s if y is None else make_pair(pair_or_s, y)
        if pair is None or not admissible(pair.s, pair.y):
            return self
        self.pairs.append(pair)
        if len(self.pairs) > self.capacity:
            self.pairs.pop(0)
        self.gamma = float(pair.y @ pair.s) / float(pair.y @ pair.y)
        return self

    def apply(self, q):
        """Two-loop recursion: z = H q for the stored inverse-Hessian model H."""
        q = np.array(q, dtype=np.float64)
        alphas = []
        for pair in reversed(self.pairs):
            a = pair.rho * float(pair.s @ q)
            alphas.append(a)
            q -= a * pair.y
        z = self.gamma * q
        for pair, a in zip(self.pairs, reversed(alphas)):
            b = pair.rho * float(pair.y @ z)
            z += pair.s * (a - b)
        return z


def harvest_pairs(trace_or_snapshots, m):
    """Up to ``m`` admissible pairs from consecutive snapshots, evenly spread.

    Accepts a CGTrace or its raw (x, grad) snapshot list. With P snapshots
    there are P-1 consecutive differences; min(m, P-1) of them are picked at
    linearly interpolated positions, always including the first and last.
    """
    snaps = getattr(trace_or_snapshots, "all_pairs_raw", trace_or_snapshots)
    n_diffs = len(snaps) - 1
    if n_diffs < 1:
        return []
    k = min(m, n_diffs)
    if k == 1:
        positions = [0]
    else:
        positions = sorted({round(j * (n_diffs - 1) / (k - 1)) for j in range(k)})
    pairs = []
    for i in positions:
        s = snaps[i + 1][0] - snaps[i][0]
        y = snaps[i + 1][1] - snaps[i][1]
        pair = make_pair(s, y)
        if pair is not None:
            pairs.append(pair)
    return pairs


def memory_from_trace(trace_or_snapshots, m):
    mem = LbfgsMemory(m)
    for pair in harvest_pairs(trace_or_snapshots, m):
        mem.admit(pair)
    return mem


class FixedMemoryPreconditioner(Preconditioner):
    """Apply one frozen LbfgsMemory; never updates itself."""

    def __init__(self, memory):
        self.memory = memory

    def apply(self, r):
        return self.memory.apply(r)


class LbfgsPreconditioner(Preconditioner):
    """Self-refreshing preconditioner for a sequence of CG runs.

    Within a run it rebuilds its memory from all snapshots seen so far each
    time ceil(m/2) new ones arrive (the flexible solver tolerates the
    change). Across runs, the final memory optionally carries over to seed
    the next run until that run's own statistics take over.
    """

    def __init__(self, m, carryover=True):
        self.m = m
        self.carryover = carryover
        self.memory = LbfgsMemory(m)
        self._snapshots = []
        self._pending = 0
        self._rebuild_every = math.ceil(m / 2)

    def begin_run(self):
        if not self.carryover:
            self.memory = LbfgsMemory(self.m)
        self._snapshots = []
        self._pending = 0

    def observe(self, index, x, grad):
        self._snapshots.append((x.copy(), grad.copy()))
        self._pending += 1
        if self._pending >= self._rebuild_every and len(self._snapshots) >= 2:
            self._rebuild()

    def end_run(self):
        if self._pending > 0 and len(self._snapshots) >= 2:
            self._rebuild()

    def apply(self, r):
        return self.memory.apply(r)

    def _rebuild(self):
        self.memory = memory_from_trace(self._snapshots, self.m)
        self._pending = 0
