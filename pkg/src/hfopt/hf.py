"""Outer second-order training loop.

One iteration: evaluate the sample gradient, minimize the damped local
quadratic with (optionally preconditioned) flexible CG, walk backward over
the traced CG iterates to pick the best candidate on held-out loss, scale
the chosen step by Armijo backtracking, and adapt the damping strength from
the realized/predicted reduction ratio. Everything runs on per-frame mean
scale so samples of different sizes share one objective.

Candidate steps are judged on held-out loss; the backward scan stops at the
last iterate before the loss stops improving. If even the best candidate is
worse than the incumbent loss, the step is rejected outright: damping grows
by 3/2, the warm start resets, and the parameters stay put.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as _model
from .corpus import sharded_reduce, total_frames
from .errors import NumericError
from .krylov import CGConfig, QuadraticModel, flexible_pcg
from .sampling import Moments


@dataclass
class DampingState:
    """Levenberg-Marquardt style damping strength and its update thresholds.

    Default mode raises lam when the quadratic model overpromised (rho low)
    and lowers it when the model tracked reality (rho high). literal_paper_mode
    swaps the two responses, preserving a published variant verbatim.
    """

    lam: float = 1.0
    rho_low: float = 0.25
    rho_high: float = 0.75
    factor_up: float = 1.5
    factor_down: float = 2.0 / 3.0
    literal_paper_mode: bool = False

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("damping must stay positive")


def update_damping(damping: DampingState, rho: float) -> DampingState:
    if damping.literal_paper_mode:
        low_factor, high_factor = damping.factor_down, damping.factor_up
    else:
        low_factor, high_factor = damping.factor_up, damping.factor_down
    lam = damping.lam
    if rho < damping.rho_low:
        lam = lam * low_factor
    elif rho > damping.rho_high:
        lam = lam * high_factor
    return replace(damping, lam=lam)


@dataclass
class LineSearchConfig:
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 10

    def __post_init__(self):
        if not (0.0 < self.armijo_c < 1.0):
            raise ValueError("armijo_c must be in (0, 1)")


def discrete_line_search(heldout_loss_fn, params, trace, loss_prev):
    """Backward scan over stored CG iterates; returns (position, best loss).

    Starting from the final iterate, earlier iterates are evaluated until
    the loss stops improving; the scan then steps forward one position. The
    backtrack trigger is armed only once the incumbent ``loss_prev`` is no
    better than the running best.
    """
    iterates = trace.stored_iterates
    if not iterates:
        raise ValueError("trace has no stored iterates")
    best = heldout_loss_fn(params + iterates[-1].d)
    chosen = len(iterates) - 1
    for pos in range(len(iterates) - 2, -1, -1):
        current = heldout_loss_fn(params + iterates[pos].d)
        if loss_prev >= best and current >= best:
            chosen = pos + 1
            break
        best = current
        chosen = pos
    return chosen, best


def armijo_scale(loss_fn, params, g, d, cfg: LineSearchConfig):
    """Largest step in {1, 1/2, 1/4, ...} passing the Armijo decrease test.

    Returns (alpha, rejected): rejected=True means d was not a descent
    direction for g and no step was attempted; alpha=0.0 with rejected=False
    means every tried scale failed the test.
    """
    gd = float(g @ d)
    if gd >= 0.0:
        return 0.0, True
    base = loss_fn(params)
    alpha = 1.0
    for _ in range(cfg.max_backtracks + 1):
        if loss_fn(params + alpha * d) <= base + cfg.armijo_c * alpha * gd:
            return alpha, False
        alpha *= cfg.backtrack_factor
    return 0.0, False


def reduction_ratio(loss_prev, loss_best, q_final):
    """Realized over predicted decrease; ~1 when the quadratic model is faithful."""
    if q_final == 0.0:
        return float("nan")
    return (loss_best - loss_prev) / q_final


@dataclass
class HfState:
    params: np.ndarray
    warm_start: np.ndarray
    damping: DampingState
    loss_prev: float
    warm_decay: float = 0.95


@dataclass
class HfConfig:
    cg: CGConfig = field(default_factory=CGConfig)
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)
    max_hf_iters: int = 30
    stop_tol: float = 1e-4
    stop_window: int = 5


@dataclass
class IterationRecord:
    iteration: int
    train_loss: float
    heldout_loss: float
    cg_iterations: int
    matvec_count: int
    accepted_iterate_index: int  # CG index of the accepted iterate, -1 on rejection
    rho: float
    lambda_after: float
    alpha: float
    grad_utts: int
    grad_frames: int
    cg_utts: int
    cg_frames: int
    accessed_data_points: int
    wall_ms: float


@dataclass
class GradientPass:
    """Output of one gradient evaluation over the sampled utterances."""

    mean_loss: float
    grad: np.ndarray  # per-frame mean gradient
    frames: int
    utterances: int
    grad_moments: Moments | None = None
    cg_moments: Moments | None = None


class _GradPayload:
    """Additive per-utterance contribution folded by sharded_reduce."""

    __slots__ = ("loss", "frames", "grad", "grad_moments", "cg_moments")

    def __init__(self, loss, frames, grad, grad_moments=None, cg_moments=None):
        self.loss = loss
        self.frames = frames
        self.grad = grad
        self.grad_moments = grad_moments
        self.cg_moments = cg_moments

    def __add__(self, other):
        def merge(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return _GradPayload(
            self.loss + other.loss,
            self.frames + other.frames,
            self.grad + other.grad,
            merge(self.grad_moments, other.grad_moments),
            merge(self.cg_moments, other.cg_moments),
        )


class CorpusObjective:
    """Binds the network model to a corpus and the sharded reduction engine."""

    def __init__(self, spec, corpus, workers=1):
        self.spec = spec
        self.corpus = corpus
        self.workers = max(1, workers)
        self.utterances = corpus.by_id()
        self.heldout_ids = corpus.heldout_ids()
        self.dim = _model.param_count(spec)
        self._batches = {}

    def _batch(self, utt):
        batch = self._batches.get(utt.id)
        if batch is None:
            batch = _model.FrameBatch(utt.frames, utt.labels, [utt.id])
            self._batches[utt.id] = batch
        return batch

    def frames_in(self, ids):
        return total_frames(self.utterances, ids)

    def gradient_pass(self, params, plan) -> GradientPass:
        want_stats = plan.want_stats
        cg_set = frozenset(int(i) for i in plan.cg_ids) if want_stats else frozenset()

        def utt_fn(utt):
            batch = self._batch(utt)
            loss, grad = _model.loss_and_gradient(self.spec, params, batch)
            grad_m = cg_m = None
            if want_stats:
                avg = grad / batch.frame_count
                grad_m = Moments.of(avg)
                if utt.id in cg_set:
                    cg_m = Moments.of(avg)
            return _GradPayload(loss.total, loss.frame_count, grad, grad_m, cg_m)

        zero = _GradPayload(0.0, 0, np.zeros(self.dim))
        folded = sharded_reduce(self.utterances, plan.grad_ids, self.workers, utt_fn, zero)
        return GradientPass(
            mean_loss=folded.loss / folded.frames,
            grad=folded.grad / folded.frames,
            frames=folded.frames,
            utterances=len(plan.grad_ids),
            grad_moments=folded.grad_moments,
            cg_moments=folded.cg_moments,
        )

    def curvature_fn(self, params, cg_ids, lam):
        """Mean-scale damped curvature product over the CG sample."""
        frames = self.frames_in(cg_ids)
        zero = np.zeros(self.dim)

        def apply(v):
            def utt_fn(utt):
                return _model.gnv_product(self.spec, params, self._batch(utt), v, 0.0)

            total = sharded_reduce(self.utterances, cg_ids, self.workers, utt_fn, zero)
            return total / frames + lam * v

        return apply

    def heldout_loss(self, params):
        def utt_fn(utt):
            return _model.forward_loss(self.spec, params, self._batch(utt))

        zero = _model.LossValue(0.0, 0)
        return sharded_reduce(self.utterances, self.heldout_ids, self.workers, utt_fn, zero).mean


def hf_step(objective, state: HfState, plan, precond, cfg: HfConfig, iteration=0):
    """One outer iteration. Returns (new state, record, gradient pass)."""
    t0 = time.perf_counter()
    try:
        grad_pass = objective.gradient_pass(state.params, plan)
        lam = state.damping.lam
        qmodel = QuadraticModel(
            gradient=grad_pass.grad,
            apply_fn=objective.curvature_fn(state.params, plan.cg_ids, lam),
        )
        trace = flexible_pcg(qmodel, state.warm_start, precond, cfg.cg)
    except NumericError as err:
        err.context.setdefault("hf_iteration", iteration)
        raise

    cg_frames = objective.frames_in(plan.cg_ids)
    accessed = grad_pass.frames + cg_frames * trace.matvec_count

    def make_record(heldout, accepted_index, rho, alpha, new_lam):
        return IterationRecord(
            iteration=iteration,
            train_loss=grad_pass.mean_loss,
            heldout_loss=heldout,
            cg_iterations=trace.iterations,
            matvec_count=trace.matvec_count,
            accepted_iterate_index=accepted_index,
            rho=rho,
            lambda_after=new_lam,
            alpha=alpha,
            grad_utts=grad_pass.utterances,
            grad_frames=grad_pass.frames,
            cg_utts=len(plan.cg_ids),
            cg_frames=cg_frames,
            accessed_data_points=accessed,
            wall_ms=(time.perf_counter() - t0) * 1000.0,
        )

    def reject():
        damping = replace(state.damping, lam=state.damping.lam * state.damping.factor_up)
        new_state = replace(
            state, warm_start=np.zeros_like(state.params), damping=damping
        )
        record = make_record(state.loss_prev, -1, float("nan"), float("nan"), damping.lam)
        return new_state, record, grad_pass

    if trace.iterations == 0 or not trace.stored_iterates:
        # nothing usable out of CG (immediate negative curvature or a zero
        # gradient); treat like a rejected step so damping grows
        return reject()

    chosen_pos, loss_best = discrete_line_search(
        objective.heldout_loss, state.params, trace, state.loss_prev
    )
    if state.loss_prev < loss_best:
        return reject()

    final = trace.stored_iterates[-1]
    rho = reduction_ratio(state.loss_prev, loss_best, final.q)
    damping = update_damping(state.damping, rho)
    chosen = trace.stored_iterates[chosen_pos]
    alpha, _ = armijo_scale(
        objective.heldout_loss, state.params, grad_pass.grad, chosen.d, cfg.line_search
    )
    new_state = HfState(
        params=state.params + alpha * chosen.d,
        warm_start=state.warm_decay * final.d,
        damping=damping,
        loss_prev=loss_best,
        warm_decay=state.warm_decay,
    )
    record = make_record(loss_best, chosen.index, rho, alpha, damping.lam)
    return new_state, record, grad_pass


def initial_state(objective, params, damping=None, warm_decay=0.95) -> HfState:
    return HfState(
        params=np.array(params, dtype=np.float64),
        warm_start=np.zeros_like(params),
        damping=damping if damping is not None else DampingState(),
        loss_prev=objective.heldout_loss(params),
        warm_decay=warm_decay,
    )


def train_loop(objective, sampler, precond, cfg: HfConfig, state: HfState):
    """Run hf_step until the iteration cap or a stalled held-out loss window."""
    records = []
    history = [state.loss_prev]
    for i in range(cfg.max_hf_iters):
        plan = sampler.plan(i)
        state, record, grad_pass = hf_step(objective, state, plan, precond, cfg, i)
        sampler.observe(grad_pass)
        records.append(record)
        history.append(state.loss_prev)
        if len(history) > cfg.stop_window:
            anchor = history[-1 - cfg.stop_window]
            if (anchor - history[-1]) < cfg.stop_tol * abs(anchor):
                break
    return records, state


def reference_gradient_descent(spec, batch, iters, lr, params=None):
    """Plain full-batch gradient descent; a sanity baseline, not a contender."""
    if params is None:
        params = _model.init_params(spec)
    params = np.array(params, dtype=np.float64)
    for _ in range(iters):
        _, grad = _model.loss_and_gradient(spec, params, batch)
        params -= (lr / batch.frame_count) * grad
    return params
