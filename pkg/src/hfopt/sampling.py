"""Schedules deciding how many utterances feed each outer iteration.

Three regimes: everything every iteration, a geometric ramp size_i =
ceil(alpha^i * s0) fixed ahead of time, and a variance-driven rule that
grows the sample whenever the per-utterance gradient scatter is too large
relative to the mean gradient ( ||Var||_1 / S <= theta^2 ||mean||_2^2 ).

The CG sample has its own budget, usually a small fraction of the corpus;
in variance mode it is drawn inside the gradient sample so its statistics
come for free from the same pass.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import model as _model
from .errors import ConfigurationError, InsufficientSampleError


def geometric_size(i, s0, alpha, n_total) -> int:
    """min(ceil(alpha^i * s0), n_total) for iteration i >= 0."""
    if i < 0:
        raise ConfigurationError("iteration index must be >= 0")
    if s0 < 1 or n_total < 1 or alpha <= 1.0:
        raise ConfigurationError("need s0 >= 1, n_total >= 1, alpha > 1")
    raw = s0 * alpha**i
    if raw >= n_total:
        return n_total
    return math.ceil(raw)


def per_utterance_avg_grad(spec, params, utterance) -> np.ndarray:
    """Gradient over the utterance's frames divided by its frame count."""
    batch = _model.FrameBatch(utterance.frames, utterance.labels, [utterance.id])
    return _model.gradient(spec, params, batch) / batch.frame_count


@dataclass
class Moments:
    """Additive running sums of per-utterance average gradients."""

    count: int
    total: np.ndarray
    total_sq: np.ndarray

    @staticmethod
    def zero(dim):
        return Moments(0, np.zeros(dim), np.zeros(dim))

    @staticmethod
    def of(avg_grad):
        return Moments(1, avg_grad, avg_grad * avg_grad)

    def __add__(self, other):
        return Moments(
            self.count + other.count,
            self.total + other.total,
            self.total_sq + other.total_sq,
        )


@dataclass
class VarianceStats:
    mean_grad: np.ndarray
    var_l1: float
    sample_utterances: int

    @staticmethod
    def from_moments(m: Moments):
        if m.count < 2:
            raise InsufficientSampleError(
                f"variance needs >= 2 utterances, got {m.count}"
            )
        var = (m.total_sq - m.total * m.total / m.count) / (m.count - 1)
        return VarianceStats(
            mean_grad=m.total / m.count,
            var_l1=float(np.abs(var).sum()),
            sample_utterances=m.count,
        )


def variance_estimate(avg_grads) -> VarianceStats:
    """Empirical componentwise variance of per-utterance average gradients."""
    if len(avg_grads) < 2:
        raise InsufficientSampleError(
            f"variance needs >= 2 utterances, got {len(avg_grads)}"
        )
    moments = Moments.zero(len(avg_grads[0]))
    for avg in avg_grads:
        moments = moments + Moments.of(np.asarray(avg, dtype=np.float64))
    return VarianceStats.from_moments(moments)


def variance_test(stats: VarianceStats, theta_s) -> bool:
    """True iff the sample's gradient estimate is trustworthy at level theta_s."""
    mean_sq = float(stats.mean_grad @ stats.mean_grad)
    return stats.var_l1 / stats.sample_utterances <= theta_s**2 * mean_sq


def next_sample_size(stats: VarianceStats, theta_s, n_total, growth_cap) -> int:
    """Smallest sample the failed test predicts would pass, capped per step."""
    mean_sq = float(stats.mean_grad @ stats.mean_grad)
    denom = theta_s**2 * mean_sq
    if denom <= 0.0:
        return n_total  # vanishing mean gradient: fall back to everything
    ratio = stats.var_l1 / denom
    target = n_total if not np.isfinite(ratio) else math.ceil(ratio)
    return min(target, math.ceil(growth_cap * stats.sample_utterances), n_total)


@dataclass(frozen=True)
class GeometricConfig:
    s0_fraction: float
    alpha_g: float
    alpha_cg: float

    def __post_init__(self):
        if not (0.0 < self.s0_fraction <= 1.0):
            raise ConfigurationError("s0_fraction must be in (0, 1]")
        if self.alpha_g <= 1.0 or self.alpha_cg <= 1.0:
            raise ConfigurationError("growth factors must exceed 1")


@dataclass(frozen=True)
class VarianceConfig:
    theta_s: float
    s0_fraction: float
    growth_cap: float = 4.0

    def __post_init__(self):
        if not (0.0 <= self.theta_s < 1.0):
            raise ConfigurationError("theta_s must be in [0, 1)")
        if not (0.0 < self.s0_fraction <= 1.0):
            raise ConfigurationError("s0_fraction must be in (0, 1]")
        if self.growth_cap <= 1.0:
            raise ConfigurationError("growth_cap must exceed 1")


@dataclass
class SamplePlan:
    """One iteration's utterance draw."""

    grad_ids: np.ndarray
    cg_ids: np.ndarray
    want_stats: bool = False


def _draw(rng, ids, size):
    size = min(size, len(ids))
    return np.sort(rng.permutation(np.asarray(ids))[:size])


class FullSchedule:
    """All training utterances for the gradient; a fixed-size CG sample."""

    def __init__(self, train_ids, cg_budget, seed):
        self.train_ids = np.sort(np.asarray(train_ids))
        self.cg_budget = max(1, min(cg_budget, len(train_ids)))
        self.seed = seed

    def plan(self, i) -> SamplePlan:
        rng = np.random.default_rng([self.seed, i])
        cg_ids = _draw(rng, self.train_ids, self.cg_budget)
        return SamplePlan(self.train_ids.copy(), cg_ids)

    def observe(self, grad_pass):
        pass


class GeometricSchedule:
    """Deterministic ramp; fresh uniform draws each iteration."""

    def __init__(self, train_ids, cfg: GeometricConfig, cg_budget, seed):
        self.train_ids = np.sort(np.asarray(train_ids))
        self.cfg = cfg
        n = len(self.train_ids)
        self.n_total = n
        self.cg_budget = max(1, min(cg_budget, n))
        self.s0_grad = max(1, math.ceil(cfg.s0_fraction * n))
        self.s0_cg = max(1, math.ceil(cfg.s0_fraction * self.cg_budget))
        self.seed = seed

    def plan(self, i) -> SamplePlan:
        rng = np.random.default_rng([self.seed, i])
        gsize = geometric_size(i, self.s0_grad, self.cfg.alpha_g, self.n_total)
        csize = geometric_size(i, self.s0_cg, self.cfg.alpha_cg, self.cg_budget)
        grad_ids = _draw(rng, self.train_ids, gsize)
        cg_ids = _draw(rng, self.train_ids, csize)
        return SamplePlan(grad_ids, cg_ids)

    def observe(self, grad_pass):
        pass


class VarianceSchedule:
    """Grow samples whenever their own gradient variance fails the test.

    The CG sample is a subset of the gradient sample, so both tests run on
    per-utterance averages collected during the single gradient pass. Sizes
    never shrink and never exceed their budgets.
    """

    def __init__(self, train_ids, cfg: VarianceConfig, cg_budget, seed):
        self.train_ids = np.sort(np.asarray(train_ids))
        self.cfg = cfg
        n = len(self.train_ids)
        self.n_total = n
        self.cg_budget = max(1, min(cg_budget, n))
        self.grad_size = min(n, max(2, math.ceil(cfg.s0_fraction * n)))
        self.cg_size = min(self.cg_budget, max(2, math.ceil(cfg.s0_fraction * self.cg_budget)))
        self.seed = seed

    def plan(self, i) -> SamplePlan:
        rng = np.random.default_rng([self.seed, i])
        grad_ids = _draw(rng, self.train_ids, self.grad_size)
        cg_ids = _draw(rng, grad_ids, min(self.cg_size, len(grad_ids)))
        return SamplePlan(grad_ids, cg_ids, want_stats=True)

    def observe(self, grad_pass):
        if grad_pass.grad_moments is not None and grad_pass.grad_moments.count >= 2:
            stats = VarianceStats.from_moments(grad_pass.grad_moments)
            if not variance_test(stats, self.cfg.theta_s):
                self.grad_size = max(
                    self.grad_size,
                    next_sample_size(stats, self.cfg.theta_s, self.n_total, self.cfg.growth_cap),
                )
        if grad_pass.cg_moments is not None and grad_pass.cg_moments.count >= 2:
            stats = VarianceStats.from_moments(grad_pass.cg_moments)
            if not variance_test(stats, self.cfg.theta_s):
                self.cg_size = max(
                    self.cg_size,
                    next_sample_size(stats, self.cfg.theta_s, self.cg_budget, self.cfg.growth_cap),
                )
