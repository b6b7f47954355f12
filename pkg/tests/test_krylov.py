"""Flexible PCG against dense solves and a textbook fixed-beta PCG oracle."""

import math

import numpy as np
import pytest

from hfopt.errors import PreconditionerNotSpdError
from hfopt.krylov import (
    CGConfig,
    IdentityPreconditioner,
    Preconditioner,
    QuadraticModel,
    flexible_pcg,
)


def spd_system(rng, dim, kappa, spectrum="uniform"):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    if spectrum == "uniform":
        eigs = np.concatenate([[1.0, kappa], rng.uniform(1.0, kappa, dim - 2)])
    else:
        eigs = np.logspace(0.0, math.log10(kappa), dim)
    a = (q * eigs) @ q.T
    b = rng.standard_normal(dim)
    return a, b


def quadratic_for(a, b):
    # minimizing 0.5 d'Ad - b'd means the model's gradient is -b
    return QuadraticModel(gradient=-b, apply_fn=lambda v: a @ v)


class MatrixPreconditioner(Preconditioner):
    def __init__(self, m_inv):
        self.m_inv = m_inv

    def apply(self, r):
        return self.m_inv @ r


def textbook_pcg_iterates(a, b, m_inv, n_iters):
    """Standard PCG with beta = (r'z)_new / (r'z)_old; returns iterates x_1.."""
    x = np.zeros_like(b)
    r = b.copy()
    z = m_inv @ r
    p = z.copy()
    rz = r @ z
    out = []
    for _ in range(n_iters):
        ap = a @ p
        alpha = rz / (p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        out.append(x.copy())
        z = m_inv @ r
        rz_new = r @ z
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    return out


def exact_config(max_iters, tol=1e-12):
    # disable the progress-window truncation so the solver runs to tolerance
    return CGConfig(
        max_iters=max_iters, residual_tol=tol, trunc_min_window=10 * max_iters
    )


class TestBasicSolves:
    def test_identity_operator_one_iteration(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal(12)
        model = quadratic_for(np.eye(12), b)
        trace = flexible_pcg(model, np.zeros(12), IdentityPreconditioner(), exact_config(20, tol=0.0))
        assert trace.iterations == 1
        np.testing.assert_array_equal(trace.stored_iterates[-1].d, b)
        assert trace.termination_reason == "residual_tol"

    def test_dense_5x5_matches_direct_solve(self):
        rng = np.random.default_rng(17)
        a, b = spd_system(rng, 5, 50.0)
        trace = flexible_pcg(
            quadratic_for(a, b), np.zeros(5), IdentityPreconditioner(), exact_config(25, tol=1e-10)
        )
        np.testing.assert_allclose(
            trace.stored_iterates[-1].d, np.linalg.solve(a, b), atol=1e-8
        )

    def test_perfect_preconditioner_one_iteration(self):
        a = np.diag([1.0, 10.0, 100.0])
        b = np.array([1.0, 2.0, 3.0])
        precond = MatrixPreconditioner(np.diag([1.0, 0.1, 0.01]))
        trace = flexible_pcg(quadratic_for(a, b), np.zeros(3), precond, exact_config(10))
        assert trace.residual_norms[0] < 1e-12

    def test_warm_start_residual_counted(self):
        rng = np.random.default_rng(3)
        a, b = spd_system(rng, 8, 10.0)
        d0 = rng.standard_normal(8)
        trace = flexible_pcg(
            quadratic_for(a, b), d0, IdentityPreconditioner(), exact_config(40)
        )
        assert trace.matvec_count == trace.iterations + 1
        np.testing.assert_allclose(trace.stored_iterates[-1].d, np.linalg.solve(a, b), atol=1e-8)


class TestTraceContract:
    def test_q_values_non_increasing(self):
        rng = np.random.default_rng(5)
        a, b = spd_system(rng, 40, 1e3)
        trace = flexible_pcg(
            quadratic_for(a, b), np.zeros(40), IdentityPreconditioner(), exact_config(80)
        )
        qs = [it.q for it in trace.stored_iterates]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(qs, qs[1:]))

    def test_stored_indices_geometric_with_final(self):
        rng = np.random.default_rng(6)
        a, b = spd_system(rng, 30, 1e3)
        trace = flexible_pcg(
            quadratic_for(a, b), np.zeros(30), IdentityPreconditioner(), exact_config(60)
        )
        idx = [it.index for it in trace.stored_iterates]
        assert idx == sorted(set(idx))
        expected = set()
        j = 0
        while math.ceil(1.3**j) <= trace.iterations:
            expected.add(math.ceil(1.3**j))
            j += 1
        assert set(idx[:-1]).issubset(expected)
        assert idx[-1] == trace.iterations

    def test_matvec_accounting(self):
        rng = np.random.default_rng(7)
        a, b = spd_system(rng, 25, 100.0)
        calls = 0

        def counting_apply(v):
            nonlocal calls
            calls += 1
            return a @ v

        model = QuadraticModel(gradient=-b, apply_fn=counting_apply)
        trace = flexible_pcg(model, np.zeros(25), IdentityPreconditioner(), exact_config(50))
        assert trace.matvec_count == calls
        assert trace.matvec_count == trace.iterations + 1

    def test_snapshots_carry_quadratic_gradient(self):
        # the (x, g) snapshots must satisfy g = A x - b so that consecutive
        # differences give y = A s for pair harvesting
        rng = np.random.default_rng(8)
        a, b = spd_system(rng, 12, 30.0)
        trace = flexible_pcg(
            quadratic_for(a, b), np.zeros(12), IdentityPreconditioner(), exact_config(24)
        )
        for x, g in trace.all_pairs_raw:
            np.testing.assert_allclose(g, a @ x - b, atol=1e-10)

    def test_negative_curvature_returns_partial_trace(self):
        a = np.diag([1.0, -1.0])
        b = np.array([0.0, 1.0])  # immediately pushes into the negative direction
        trace = flexible_pcg(
            quadratic_for(a, b), np.zeros(2), IdentityPreconditioner(), exact_config(10)
        )
        assert trace.termination_reason == "negative_curvature"
        assert trace.iterations == 0
        assert trace.stored_iterates == []

    def test_negative_curvature_after_progress(self):
        a = np.diag([5.0, 4.0, -0.5])
        b = np.array([1.0, 1.0, 0.05])
        trace = flexible_pcg(
            quadratic_for(a, b), np.zeros(3), IdentityPreconditioner(), exact_config(10, tol=0.0)
        )
        assert trace.termination_reason == "negative_curvature"
        assert trace.stored_iterates[-1].index == trace.iterations


class TestTruncation:
    def test_truncates_on_stalled_progress(self):
        # severely ill-conditioned system: progress per window eventually
        # falls below the k * eps threshold long before the iteration cap
        rng = np.random.default_rng(9)
        a, b = spd_system(rng, 200, 1e10, spectrum="log")
        cfg = CGConfig(max_iters=3000, trunc_eps=5e-4, trunc_min_window=10, residual_tol=0.0)
        trace = flexible_pcg(quadratic_for(a, b), np.zeros(200), IdentityPreconditioner(), cfg)
        assert trace.termination_reason == "truncated"
        assert trace.iterations < 3000

    def test_tiny_eps_truncates_only_after_convergence(self):
        # with eps ~ eps_machine the rule may only fire once the quadratic
        # has numerically plateaued, i.e. the solution is already converged
        rng = np.random.default_rng(10)
        a, b = spd_system(rng, 30, 10.0)
        cfg = CGConfig(max_iters=90, trunc_eps=1e-12, trunc_min_window=3, residual_tol=0.0)
        trace = flexible_pcg(quadratic_for(a, b), np.zeros(30), IdentityPreconditioner(), cfg)
        assert trace.residual_norms[-1] <= 1e-6 * np.linalg.norm(b)


class TestFlexibleVsTextbook:
    def test_fixed_preconditioner_matches_textbook_iterates(self):
        # algebraically the Polak-Ribiere beta equals the textbook beta when
        # the preconditioner is constant; in floating point the two paths
        # track each other until the iterates numerically converge, so the
        # comparison covers the live prefix of the run
        rng = np.random.default_rng(11)
        for dim in (10, 25, 50):
            a, b = spd_system(rng, dim, 1e3)
            c = rng.standard_normal((dim, dim)) / math.sqrt(dim)
            m_inv = c @ c.T + np.eye(dim)
            n_iters = min(12, dim)
            oracle = textbook_pcg_iterates(a, b, m_inv, n_iters)
            trace = flexible_pcg(
                quadratic_for(a, b),
                np.zeros(dim),
                MatrixPreconditioner(m_inv),
                CGConfig(max_iters=n_iters, residual_tol=0.0, trunc_min_window=10 * dim),
            )
            scale = np.max(np.abs(oracle[-1]))
            for it in trace.stored_iterates:
                np.testing.assert_allclose(
                    it.d, oracle[it.index - 1], atol=1e-10 * max(1.0, scale)
                )

    def test_finite_termination_well_conditioned(self):
        rng = np.random.default_rng(12)
        for dim in (10, 20, 50):
            a, b = spd_system(rng, dim, 1e3)
            cfg = CGConfig(max_iters=dim, residual_tol=1e-12, trunc_min_window=10 * dim)
            trace = flexible_pcg(quadratic_for(a, b), np.zeros(dim), IdentityPreconditioner(), cfg)
            final = trace.stored_iterates[-1].d
            assert np.linalg.norm(b - a @ final) <= 1e-8 * np.linalg.norm(b)


class TestQuadraticValue:
    def test_zero(self):
        rng = np.random.default_rng(13)
        a, b = spd_system(rng, 6, 10.0)
        assert quadratic_for(a, b).value(np.zeros(6)) == 0.0

    def test_minimum_value(self):
        rng = np.random.default_rng(14)
        a, b = spd_system(rng, 9, 10.0)
        model = quadratic_for(a, b)
        d_star = np.linalg.solve(a, b)
        g = -b
        assert model.value(d_star) == pytest.approx(0.5 * float(g @ d_star), rel=1e-12)

    def test_quadratic_in_scale(self):
        rng = np.random.default_rng(15)
        a, b = spd_system(rng, 7, 10.0)
        model = quadratic_for(a, b)
        d = rng.standard_normal(7)
        alphas = np.array([0.3, 1.1, 2.4])
        values = [model.value(alpha * d) for alpha in alphas]
        coeffs = np.polyfit(alphas, values, 2)
        probe = 1.7
        assert np.polyval(coeffs, probe) == pytest.approx(
            model.value(probe * d), abs=1e-10 * max(1.0, abs(values[-1]))
        )


class TestPreconditionerContract:
    def test_non_spd_preconditioner_raises(self):
        rng = np.random.default_rng(16)
        a, b = spd_system(rng, 5, 10.0)
        with pytest.raises(PreconditionerNotSpdError):
            flexible_pcg(
                quadratic_for(a, b),
                np.zeros(5),
                MatrixPreconditioner(-np.eye(5)),
                exact_config(10),
            )

    def test_linearity_of_operator_interface(self):
        rng = np.random.default_rng(18)
        a, b = spd_system(rng, 8, 10.0)
        model = quadratic_for(a, b)
        for _ in range(10):
            v1 = rng.standard_normal(8)
            v2 = rng.standard_normal(8)
            c = float(rng.standard_normal())
            np.testing.assert_allclose(
                model.apply(c * v1 + v2),
                c * model.apply(v1) + model.apply(v2),
                rtol=1e-10,
                atol=1e-12,
            )
