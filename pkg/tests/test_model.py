"""Network model: loss, gradient, and curvature products vs independent oracles."""

import math

import numpy as np
import pytest

from hfopt.errors import ConfigurationError
from hfopt.model import (
    FrameBatch,
    NetworkSpec,
    forward_activations,
    forward_loss,
    gnv_product,
    gradient,
    init_params,
    loss_and_gradient,
    param_count,
    softmax,
    unpack_params,
)


def random_batch(rng, n_frames, dim, n_classes):
    return FrameBatch(
        rng.standard_normal((n_frames, dim)), rng.integers(0, n_classes, n_frames)
    )


def fd_gradient(spec, params, batch, eps=1e-5):
    """Central finite differences of the summed loss."""
    out = np.zeros_like(params)
    for j in range(len(params)):
        up = params.copy()
        up[j] += eps
        dn = params.copy()
        dn[j] -= eps
        out[j] = (
            forward_loss(spec, up, batch).total - forward_loss(spec, dn, batch).total
        ) / (2 * eps)
    return out


def dense_gauss_newton(spec, params, batch, lam, eps=1e-5):
    """Assemble J^T H J + lam*I from a finite-difference logit Jacobian."""
    n = len(params)
    n_frames = batch.frame_count
    k = spec.n_classes

    def logits_of(p):
        return forward_activations(spec, p, batch.features)[1]

    jac = np.zeros((n_frames, k, n))
    for j in range(n):
        up = params.copy()
        up[j] += eps
        dn = params.copy()
        dn[j] -= eps
        jac[:, :, j] = (logits_of(up) - logits_of(dn)) / (2 * eps)
    probs = softmax(logits_of(params))
    g = np.zeros((n, n))
    for f in range(n_frames):
        h = np.diag(probs[f]) - np.outer(probs[f], probs[f])
        g += jac[f].T @ h @ jac[f]
    return g + lam * np.eye(n)


class TestParamCount:
    def test_two_layer(self):
        assert param_count(NetworkSpec([2, 3])) == 9

    def test_deep(self):
        assert param_count(NetworkSpec([20, 64, 64, 10])) == 6154

    def test_minimal(self):
        assert param_count(NetworkSpec([1, 1])) == 2

    def test_invalid_specs(self):
        with pytest.raises(ConfigurationError):
            NetworkSpec([5])
        with pytest.raises(ConfigurationError):
            NetworkSpec([5, 0, 3])


class TestInitParams:
    def test_deterministic(self):
        spec = NetworkSpec([4, 7, 3], init_seed=99)
        assert np.array_equal(init_params(spec), init_params(spec))

    def test_biases_zero(self):
        spec = NetworkSpec([5, 6, 4], init_seed=1)
        for _w, b in unpack_params(spec, init_params(spec)):
            assert np.all(b == 0.0)

    def test_fan_in_bound(self):
        spec = NetworkSpec([4, 8, 2], init_seed=7)
        layers = unpack_params(spec, init_params(spec))
        assert np.all(np.abs(layers[0][0]) <= 0.5)  # fan_in 4 -> r = 0.5
        assert np.all(np.abs(layers[1][0]) <= 1.0 / np.sqrt(8))


class TestForwardLoss:
    def test_zero_params_uniform_softmax(self):
        spec = NetworkSpec([6, 12, 10])
        rng = np.random.default_rng(0)
        batch = random_batch(rng, 17, 6, 10)
        loss = forward_loss(spec, np.zeros(param_count(spec)), batch)
        assert loss.total == pytest.approx(17 * math.log(10), rel=1e-12)
        assert loss.mean == pytest.approx(math.log(10), rel=1e-12)

    def test_confident_logit_gap(self):
        # single linear layer, weights steer 20 nats of margin to the true class
        spec = NetworkSpec([2, 3])
        params = np.zeros(param_count(spec))
        layers = unpack_params(spec, params)
        layers[0][0][0, 0] = 20.0  # x=(1,0) -> logits (20, 0, 0)
        batch = FrameBatch(np.array([[1.0, 0.0]]), np.array([0]))
        loss = forward_loss(spec, params, batch)
        assert loss.mean < 1e-6

    def test_halves_add(self):
        spec = NetworkSpec([4, 9, 5], init_seed=3)
        params = init_params(spec)
        rng = np.random.default_rng(5)
        batch = random_batch(rng, 24, 4, 5)
        whole = forward_loss(spec, params, batch).total
        first = forward_loss(
            spec, params, FrameBatch(batch.features[:12], batch.labels[:12])
        ).total
        second = forward_loss(
            spec, params, FrameBatch(batch.features[12:], batch.labels[12:])
        ).total
        assert whole == pytest.approx(first + second, rel=1e-14)

    def test_dimension_mismatch(self):
        spec = NetworkSpec([4, 3])
        batch = random_batch(np.random.default_rng(0), 5, 7, 3)
        with pytest.raises(ConfigurationError):
            forward_loss(spec, init_params(spec), batch)


class TestGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2024)
        for sizes in ([3, 4, 3], [2, 5, 2], [6, 4], [4, 3, 3, 2]):
            spec = NetworkSpec(sizes, init_seed=int(rng.integers(1 << 30)))
            assert param_count(spec) <= 60
            params = init_params(spec) + 0.3 * rng.standard_normal(param_count(spec))
            batch = random_batch(rng, 9, sizes[0], sizes[-1])
            g = gradient(spec, params, batch)
            fd = fd_gradient(spec, params, batch)
            assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))

    def test_batch_additivity(self):
        spec = NetworkSpec([3, 6, 4], init_seed=8)
        params = init_params(spec)
        rng = np.random.default_rng(8)
        batch = random_batch(rng, 20, 3, 4)
        left = gradient(spec, params, FrameBatch(batch.features[:7], batch.labels[:7]))
        right = gradient(spec, params, FrameBatch(batch.features[7:], batch.labels[7:]))
        np.testing.assert_allclose(
            left + right, gradient(spec, params, batch), rtol=1e-12, atol=1e-14
        )

    def test_zero_at_constructed_stationary_point(self):
        # two frames share x=(1,) but carry both labels; the w1 component of
        # the gradient vanishes where both classes get equal probability.
        # Locate that root of the finite-difference derivative by bisection,
        # then check the analytic gradient agrees it is (numerically) zero.
        spec = NetworkSpec([1, 2])
        batch = FrameBatch(np.array([[1.0], [1.0]]), np.array([0, 1]))
        base = np.array([0.0, 0.3, 0.0, 0.0])  # [w1, w2, b1, b2]

        def dloss_dw1(w1, eps=1e-6):
            up = base.copy()
            up[0] = w1 + eps
            dn = base.copy()
            dn[0] = w1 - eps
            return (
                forward_loss(spec, up, batch).total - forward_loss(spec, dn, batch).total
            ) / (2 * eps)

        lo, hi = -2.0, 2.0
        assert dloss_dw1(lo) < 0 < dloss_dw1(hi)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if dloss_dw1(mid) < 0:
                lo = mid
            else:
                hi = mid
        w1_star = 0.5 * (lo + hi)
        assert w1_star == pytest.approx(0.3, abs=1e-9)  # symmetry fixes the root
        at_star = base.copy()
        at_star[0] = w1_star
        assert abs(gradient(spec, at_star, batch)[0]) < 1e-9

    def test_directional_derivative_consistency(self):
        spec = NetworkSpec([4, 6, 3], init_seed=21)
        params = init_params(spec)
        rng = np.random.default_rng(21)
        batch = random_batch(rng, 12, 4, 3)
        g = gradient(spec, params, batch)
        for _ in range(5):
            u = rng.standard_normal(len(params))
            u /= np.linalg.norm(u)
            eps = 1e-5
            lhs = (
                forward_loss(spec, params + eps * u, batch).total
                - forward_loss(spec, params - eps * u, batch).total
            ) / (2 * eps)
            assert lhs == pytest.approx(float(g @ u), abs=1e-7 * (1 + abs(lhs)))


class TestGnvProduct:
    def setup_method(self):
        self.spec = NetworkSpec([3, 4, 2], init_seed=5)  # 26 params
        self.rng = np.random.default_rng(5)
        self.params = init_params(self.spec) + 0.2 * self.rng.standard_normal(
            param_count(self.spec)
        )
        self.batch = random_batch(self.rng, 8, 3, 2)

    def test_zero_direction(self):
        out = gnv_product(self.spec, self.params, self.batch, np.zeros(26), 0.7)
        assert np.all(out == 0.0)

    def test_damping_identity(self):
        v = self.rng.standard_normal(26)
        lam = 0.37
        with_damp = gnv_product(self.spec, self.params, self.batch, v, lam)
        without = gnv_product(self.spec, self.params, self.batch, v, 0.0)
        np.testing.assert_allclose(with_damp - without, lam * v, rtol=1e-12, atol=1e-13)

    def test_matches_dense_assembly(self):
        lam = 0.25
        dense = dense_gauss_newton(self.spec, self.params, self.batch, lam)
        for _ in range(6):
            v = self.rng.standard_normal(26)
            got = gnv_product(self.spec, self.params, self.batch, v, lam)
            want = dense @ v
            assert np.max(np.abs(got - want)) <= 1e-6 * max(1.0, np.max(np.abs(want)))

    def test_symmetry(self):
        for _ in range(20):
            v1 = self.rng.standard_normal(26)
            v2 = self.rng.standard_normal(26)
            a = float(v1 @ gnv_product(self.spec, self.params, self.batch, v2, 0.4))
            b = float(v2 @ gnv_product(self.spec, self.params, self.batch, v1, 0.4))
            assert a == pytest.approx(b, rel=1e-10)

    def test_positive_semidefinite(self):
        for _ in range(20):
            v = self.rng.standard_normal(26)
            quad = float(v @ gnv_product(self.spec, self.params, self.batch, v, 0.0))
            assert quad >= -1e-12 * float(v @ v)

    def test_batch_additivity_with_single_damping(self):
        v = self.rng.standard_normal(26)
        lam = 0.6
        first = FrameBatch(self.batch.features[:3], self.batch.labels[:3])
        second = FrameBatch(self.batch.features[3:], self.batch.labels[3:])
        parts = (
            gnv_product(self.spec, self.params, first, v, 0.0)
            + gnv_product(self.spec, self.params, second, v, 0.0)
            + lam * v
        )
        whole = gnv_product(self.spec, self.params, self.batch, v, lam)
        np.testing.assert_allclose(parts, whole, rtol=1e-12, atol=1e-13)

    def test_rejects_bad_direction_length(self):
        with pytest.raises(ConfigurationError):
            gnv_product(self.spec, self.params, self.batch, np.zeros(5), 0.0)


class TestLossAndGradient:
    def test_agrees_with_separate_calls(self):
        spec = NetworkSpec([3, 5, 4], init_seed=2)
        params = init_params(spec)
        batch = random_batch(np.random.default_rng(2), 10, 3, 4)
        loss, grad = loss_and_gradient(spec, params, batch)
        assert loss.total == forward_loss(spec, params, batch).total
        np.testing.assert_array_equal(grad, gradient(spec, params, batch))
