"""Flexible preconditioned conjugate gradient on a damped quadratic model.

The solver tolerates a preconditioner that changes between iterations by
using the Polak-Ribiere form of beta, beta_i = r_{i+1}.(z_{i+1} - z_i) /
(r_i.z_i), which reduces to the textbook formula when the preconditioner is
fixed. Iterates are traced for two downstream consumers: a descending
subsequence for the outer loop's line search, and raw (x, grad) snapshots
from which quasi-Newton curvature pairs are harvested.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, PreconditionerNotSpdError


class Preconditioner:
    """Symmetric positive definite application z = M^{-1} r.

    The solver brackets each run with ``begin_run``/``end_run`` and calls
    ``observe`` once per iterate (including the warm start at index 0) with
    the iterate and the quadratic's gradient there; stateful implementations
    may use these to refresh themselves mid-run (the solver is flexible-CG,
    so that is legal).
    """

    def apply(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def observe(self, index: int, x: np.ndarray, grad: np.ndarray) -> None:
        pass

    def begin_run(self) -> None:
        pass

    def end_run(self) -> None:
        pass


class IdentityPreconditioner(Preconditioner):
    def apply(self, r):
        return r


@dataclass
class QuadraticModel:
    """q(d) = g.d + 0.5 * d.(apply_fn(d)) with apply_fn symmetric PSD + damping."""

    gradient: np.ndarray
    apply_fn: object  # callable vector -> vector

    @property
    def rhs(self):
        return -self.gradient

    def apply(self, d):
        return self.apply_fn(d)

    def value(self, d):
        return float(self.gradient @ d + 0.5 * (d @ self.apply(d)))


@dataclass
class CGConfig:
    max_iters: int = 100
    trunc_eps: float = 5e-4
    trunc_min_window: int = 10
    residual_tol: float = 0.0
    store_stride_base: float = 1.3

    def __post_init__(self):
        if self.max_iters < 1 or self.trunc_eps <= 0 or self.trunc_min_window < 1:
            raise ValueError("CG configuration values must be positive")
        if self.residual_tol < 0 or self.store_stride_base <= 1.0:
            raise ValueError("residual_tol >= 0 and store_stride_base > 1 required")


@dataclass
class StoredIterate:
    index: int
    d: np.ndarray
    q: float


@dataclass
class CGTrace:
    """Everything the outer loop needs to know about one CG run."""

    stored_iterates: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    all_pairs_raw: list = field(default_factory=list)  # (x_i, grad_i) snapshots
    matvec_count: int = 0
    termination_reason: str = "max_iters"  # truncated | max_iters | residual_tol | negative_curvature

    @property
    def iterations(self):
        return len(self.residual_norms)

    @property
    def final_iterate(self):
        return self.stored_iterates[-1] if self.stored_iterates else None


def _store_indices(base, limit):
    """Deduplicated ceil(base^j) schedule: 1, 2, 3, 4, ..., growing geometrically."""
    idxs = set()
    j = 0
    while True:
        i = math.ceil(base**j)
        if i > limit:
            break
        idxs.add(i)
        j += 1
    return idxs


def flexible_pcg(model: QuadraticModel, d0: np.ndarray, precond: Preconditioner,
                 cfg: CGConfig) -> CGTrace:
    """Minimize the quadratic model from warm start ``d0``.

    Termination, in priority order per iteration: negative curvature of the
    operator (trace so far is returned, caller decides how to recover),
    residual norm <= cfg.residual_tol, Martens-style relative-progress
    truncation over a trailing window, or cfg.max_iters.
    """
    b = model.rhs
    x = np.array(d0, dtype=np.float64)
    trace = CGTrace()
    precond.begin_run()

    ax = model.apply(x)
    trace.matvec_count += 1
    r = b - ax  # CG residual; the quadratic's gradient at x is -r
    trace.all_pairs_raw.append((x.copy(), -r))
    precond.observe(0, x, -r)

    q_hist = [float(-0.5 * (x @ (b + r)))]  # q(x) without an extra matvec
    rnorm = float(np.linalg.norm(r))
    if rnorm <= cfg.residual_tol:
        trace.termination_reason = "residual_tol"
        precond.end_run()
        return trace

    z = precond.apply(r)
    rz = float(r @ z)
    if rz <= 0.0:
        raise PreconditionerNotSpdError(
            f"r0.z0 = {rz:.3e} <= 0; preconditioner is not SPD", op="flexible_pcg"
        )
    p = z.copy()

    store_at = _store_indices(cfg.store_stride_base, cfg.max_iters)
    bnorm = float(np.linalg.norm(b))

    for i in range(1, cfg.max_iters + 1):
        ap = model.apply(p)
        trace.matvec_count += 1
        pap = float(p @ ap)
        if pap <= 0.0:
            # hand back what we have; the outer loop recovers by raising damping
            trace.termination_reason = "negative_curvature"
            break
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        if not np.isfinite(r).all():
            raise NumericError("non-finite CG residual", op="flexible_pcg", iteration=i)

        q_i = float(-0.5 * (x @ (b + r)))
        q_hist.append(q_i)
        rnorm = float(np.linalg.norm(r))
        trace.residual_norms.append(rnorm)
        trace.all_pairs_raw.append((x.copy(), -r))
        precond.observe(i, x, -r)
        if i in store_at:
            trace.stored_iterates.append(StoredIterate(i, x.copy(), q_i))

        if rnorm <= cfg.residual_tol:
            trace.termination_reason = "residual_tol"
            break

        if i > cfg.trunc_min_window:
            k = max(cfg.trunc_min_window, math.ceil(0.1 * i))
            if k <= i and q_i < 0.0 and (q_hist[i - k] - q_i) / abs(q_i) < k * cfg.trunc_eps:
                trace.termination_reason = "truncated"
                break

        z_new = precond.apply(r)
        rz_new = float(r @ z_new)
        if rz_new <= 0.0:
            if rnorm <= max(cfg.residual_tol, 1e-13 * bnorm):
                trace.termination_reason = "residual_tol"
                break
            raise PreconditionerNotSpdError(
                f"r.z = {rz_new:.3e} <= 0 at iteration {i}", op="flexible_pcg"
            )
        beta = float(r @ (z_new - z)) / rz
        z = z_new
        rz = rz_new
        p = z + beta * p

    # the line search wants the last completed iterate stored as d_N
    last = len(q_hist) - 1
    if last >= 1 and (not trace.stored_iterates or trace.stored_iterates[-1].index != last):
        trace.stored_iterates.append(StoredIterate(last, x.copy(), q_hist[last]))
    precond.end_run()
    return trace
