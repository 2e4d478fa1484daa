import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpdesign.error_model import (
    AccuracyObjective,
    BoundConstants,
    ErrorModelConfig,
    epsilon_from_std,
    global_error,
    global_error_gradient,
    local_error_density,
    node_table,
    radius_bound,
    transport_factor,
    unavoidable_error,
)
from gpdesign.exceptions import InvalidRegime, SingularTransport
from gpdesign.gp import Design, Hyperparameters, TrainingData, fit
from gpdesign.models import ParabolicCylinderModel

from conftest import random_model

SIGMA_L = 1e-2 * np.diag([1.0, 0.1, 1.0])


def transport_svd(J, S, lam):
    """(J^T S^-1 J + lam I)^-1 J^T S^-1 via the SVD of the whitened Jacobian."""
    w, V = np.linalg.eigh(S)
    root_inv = V @ np.diag(w**-0.5) @ V.T
    U, sv, Vt = np.linalg.svd(root_inv @ J, full_matrices=False)
    M = Vt.T @ np.diag(sv / (sv**2 + lam)) @ U.T @ root_inv
    return np.linalg.svd(M, compute_uv=False)[0]


def parabolic_surrogate(n_extra=4, seed=0, tol=0.05):
    forward = ParabolicCylinderModel(noise="exact")
    rng = np.random.default_rng(seed)
    corners = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0], [0.5, 1], [0, 0.5], [1, 0.5]], float)
    pts = np.vstack([corners, rng.random((n_extra, 2))])
    design = Design(pts, np.full(len(pts), tol), [0, 0], [1, 1])
    data = TrainingData(design, forward.value(pts))
    return fit(data, Hyperparameters(5.0, [0.8, 0.8]))


class TestTransportFactor:
    def test_scalar(self):
        assert transport_factor([[2.0]], [[1.0]], lam=0.0) == pytest.approx(0.5, rel=1e-14)

    def test_zero_jacobian(self):
        assert transport_factor(np.zeros((3, 2)), np.eye(3), lam=1.0) == 0.0

    def test_singular_without_regularization(self):
        with pytest.raises(SingularTransport):
            transport_factor(np.zeros((3, 2)), np.eye(3), lam=0.0)

    def test_matches_svd_oracle(self, rng):
        for _ in range(50):
            m, d = int(rng.integers(2, 5)), int(rng.integers(1, 3))
            J = rng.normal(size=(m, d))
            A = rng.normal(size=(m, m))
            S = A @ A.T + 0.1 * np.eye(m)
            lam = float(rng.choice([0.0, 1e-3, 0.5]))
            assert transport_factor(J, S, lam) == pytest.approx(transport_svd(J, S, lam), rel=1e-10)

    def test_batched_equals_single(self, rng):
        J = rng.normal(size=(6, 3, 2))
        batch = transport_factor(J, SIGMA_L)
        for k in range(6):
            assert batch[k] == pytest.approx(transport_factor(J[k], SIGMA_L), rel=1e-13)


class TestEpsilon:
    def test_trace(self):
        assert epsilon_from_std([0.1, 0.2]) == pytest.approx(math.sqrt(0.05), rel=1e-14)

    def test_chi_median_single_output(self):
        s = 0.37
        assert epsilon_from_std([s], "chi-median") == pytest.approx(math.sqrt((7 / 9) ** 3) * s, rel=1e-14)

    def test_zero(self):
        assert epsilon_from_std([0.0, 0.0, 0.0]) == 0.0
        assert epsilon_from_std([0.0, 0.0], "chi-median") == 0.0

    def test_trace_q_power_sum(self):
        std = np.array([0.1, 0.3, 0.2])
        assert epsilon_from_std(std, "trace", 4.0) ** 4 == pytest.approx(np.sum(std**4), rel=1e-12)


class TestLocalDensity:
    def test_product(self):
        assert 2.0 * epsilon_from_std([0.1, 0.2]) == pytest.approx(0.44721, abs=1e-5)

    def test_equals_transport_times_epsilon(self):
        model = parabolic_surrogate()
        p = np.array([0.3, 0.7])
        w = transport_factor(model.predict_gradient(p), SIGMA_L)
        eps = epsilon_from_std(model.predict(p)[1])
        assert local_error_density(model, SIGMA_L, ErrorModelConfig(), p) == pytest.approx(w * eps, rel=1e-14)

    def test_vanishes_at_exact_training_point(self):
        forward = ParabolicCylinderModel(noise="exact")
        pts = np.array([[0.2, 0.3], [0.8, 0.6], [0.5, 0.9], [0.4, 0.5]])
        data = TrainingData(Design(pts, np.full(4, 1e-7), [0, 0], [1, 1]), forward.value(pts))
        model = fit(data, Hyperparameters(5.0, [0.8, 0.8]))
        g = local_error_density(model, SIGMA_L, ErrorModelConfig(), pts[3])
        far = local_error_density(model, SIGMA_L, ErrorModelConfig(), np.array([0.95, 0.05]))
        assert g < 1e-4 * far


class TestBounds:
    consts = BoundConstants(1.0, 1.0, 1.0)

    def test_zero_error(self):
        assert radius_bound(0.0, 0.0, self.consts, np.eye(2)) == 0.0
        assert radius_bound(0.0, 0.0, self.consts, np.eye(2), exact=True) == 0.0

    def test_simplified(self):
        assert radius_bound(0.01, 0.001, self.consts, np.eye(2)) == pytest.approx(0.121, rel=1e-12)

    def test_exact(self):
        expected = (3 * (0.001 + 1) * 0.01 + 0.001) / (1 - 0.003)
        assert radius_bound(0.01, 0.001, self.consts, np.eye(2), exact=True) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.031124, abs=1e-6)

    def test_invalid_regime(self):
        with pytest.raises(InvalidRegime):
            radius_bound(0.01, 0.5, self.consts, np.eye(2), exact=True)

    def test_unavoidable_error(self):
        assert unavoidable_error(self.consts, 0.01 * np.eye(3)) == pytest.approx(30.0, rel=1e-12)
        assert unavoidable_error(self.consts, np.eye(3)) == pytest.approx(3.0, rel=1e-12)

    def test_unavoidable_error_anisotropic(self):
        # spectral norms of diag(1, 0.1, 1)*1e-2 and its inverse, computed by hand
        expected = 3.0 * 1000.0 * math.sqrt(1e-2)
        assert unavoidable_error(self.consts, SIGMA_L) == pytest.approx(expected, rel=1e-12)


class TestGlobalError:
    def test_constant_integrand(self):
        model = parabolic_surrogate()
        table = node_table(model, SIGMA_L, ErrorModelConfig())
        table.weight[:] = 1.0
        table.epsilon[:] = 0.1
        assert table.error() == pytest.approx(0.1, rel=1e-12)

    def test_zero_variance(self):
        model = parabolic_surrogate()
        table = node_table(model, SIGMA_L, ErrorModelConfig())
        table.epsilon[:] = 0.0
        assert table.error() == 0.0

    def test_grid_is_cell_centred(self):
        nodes = ErrorModelConfig(grid_points=4).nodes([0, 0], [1, 2])
        assert nodes.shape == (16, 2)
        np.testing.assert_allclose(np.unique(nodes[:, 0]), [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(np.unique(nodes[:, 1]), [0.25, 0.75, 1.25, 1.75])

    def test_direct_sum(self):
        model = parabolic_surrogate()
        cfg = ErrorModelConfig(grid_points=5)
        E, table = global_error(model, SIGMA_L, cfg)
        total = 0.0
        for p in table.nodes:
            total += local_error_density(model, SIGMA_L, cfg, p) ** 2
        assert E == pytest.approx(math.sqrt(total / 25), rel=1e-12)

    def test_monte_carlo_agrees_with_grid(self):
        model = parabolic_surrogate()
        E_grid, _ = global_error(model, SIGMA_L, ErrorModelConfig())
        E_mc, _ = global_error(model, SIGMA_L, ErrorModelConfig(integration="mc", mc_points=100_000))
        assert abs(E_mc - E_grid) / E_grid <= 0.05

    def test_refining_never_increases_error(self, rng):
        model = parabolic_surrogate()
        cfg = ErrorModelConfig(grid_points=10)
        table = node_table(model, SIGMA_L, cfg)
        obj = AccuracyObjective(model.hyper, model.points, table, model.n_outputs)
        v = model.data.design.tolerances**-2.0
        for _ in range(20):
            v2 = v * (1 + rng.random(v.size) * (rng.random(v.size) < 0.5))
            assert obj.value(v2) <= obj.value(v) * (1 + 1e-12)


class TestAccuracyObjective:
    def test_value_matches_refit_model(self):
        # frozen-weight objective equals E^q of a model refit at the same tolerances
        model = parabolic_surrogate()
        cfg = ErrorModelConfig(grid_points=8)
        table = node_table(model, SIGMA_L, cfg)
        obj = AccuracyObjective(model.hyper, model.points, table, model.n_outputs)
        # the fitted model carries the factorization jitter on its noise diagonal
        v = 1.0 / (model.data.design.tolerances**2 + model.jitter * model.hyper.signal_variance)
        assert obj.value(v) == pytest.approx(table.error() ** 2, rel=1e-10)

    def test_zero_information_point_is_absent(self, rng):
        model = parabolic_surrogate()
        table = node_table(model, SIGMA_L, ErrorModelConfig(grid_points=6))
        extra = np.vstack([model.points, [[0.31, 0.47]]])
        full = AccuracyObjective(model.hyper, extra, table, model.n_outputs)
        base = AccuracyObjective(model.hyper, model.points, table, model.n_outputs)
        v = model.data.design.tolerances**-2.0
        assert full.value(np.append(v, 0.0)) == pytest.approx(base.value(v), rel=1e-12)

    def test_decoupled_candidate_has_zero_gradient(self):
        model = parabolic_surrogate()
        table = node_table(model, SIGMA_L, ErrorModelConfig(grid_points=6))
        v = np.append(model.data.design.tolerances**-2.0, 100.0)
        g = global_error_gradient(model, SIGMA_L, ErrorModelConfig(), v, candidates=[[50.0, 50.0]], table=table)
        assert abs(g[-1]) < 1e-300
        assert np.all(g[:-1] < 0)

    def test_gradient_and_hessian_finite_differences(self, rng):
        for _ in range(20):
            model = random_model(rng, int(rng.integers(2, 6)), 2, m=3)
            cfg = ErrorModelConfig(grid_points=6, q=float(rng.choice([2.0, 3.0])))
            table = node_table(model, SIGMA_L, cfg, nodes=rng.random((30, 2)))
            obj = AccuracyObjective(model.hyper, model.points, table, model.n_outputs)
            v = rng.uniform(5.0, 200.0, model.data.design.n)
            g, H = obj.gradient(v), obj.hessian(v)
            fd_g, fd_H = np.empty_like(g), np.empty_like(H)
            for i in range(v.size):
                h = 1e-2 * v[i]
                e = np.zeros_like(v)
                e[i] = h
                f, df = obj.value, obj.gradient
                # fourth-order stencil: the objective loses digits to cancellation at small steps
                fd_g[i] = (-f(v + 2 * e) + 8 * f(v + e) - 8 * f(v - e) + f(v - 2 * e)) / (12 * h)
                fd_H[:, i] = (-df(v + 2 * e) + 8 * df(v + e) - 8 * df(v - e) + df(v - 2 * e)) / (12 * h)
            assert np.abs(g - fd_g).max() <= 1e-6 * np.abs(g).max()
            assert np.abs(H - fd_H).max() <= 1e-5 * np.abs(H).max()

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_midpoint_convexity(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(rng, int(rng.integers(2, 6)), 2, m=3)
        table = node_table(model, SIGMA_L, ErrorModelConfig(), nodes=rng.random((40, 2)))
        obj = AccuracyObjective(model.hyper, model.points, table, model.n_outputs)
        a = rng.uniform(0, 1e3, model.data.design.n)
        b = rng.uniform(0, 1e3, model.data.design.n)
        mid = obj.value(0.5 * (a + b))
        assert mid <= 0.5 * (obj.value(a) + obj.value(b)) + 1e-12 * max(obj.value(a), obj.value(b))


class TestConfig:
    def test_rejects_small_q(self):
        with pytest.raises(ValueError):
            ErrorModelConfig(q=1.5)

    def test_beta_needs_c2(self):
        with pytest.raises(ValueError):
            ErrorModelConfig(beta=0.1)
        ErrorModelConfig(beta=0.1, c2=2.0)

    def test_beta_shifts_weight(self):
        model = parabolic_surrogate()
        plain = node_table(model, SIGMA_L, ErrorModelConfig(grid_points=5))
        shifted = node_table(model, SIGMA_L, ErrorModelConfig(grid_points=5, beta=0.2, c2=4.0))
        np.testing.assert_allclose(shifted.weight, plain.weight + 0.05, rtol=1e-14)
