import math

import numpy as np
import pytest

from gpdesign.exceptions import SingularNormalMatrix
from gpdesign.gp import Design, Hyperparameters, TrainingData, fit
from gpdesign.inverse import (
    InverseProblem,
    gauss_newton_batch,
    gauss_newton_solve,
    laplace_covariance,
    multistart_solve,
    objective,
    start_grid,
)
from gpdesign.models import ParabolicCylinderModel


class Linear:
    def __init__(self, A, b=None):
        self.A = np.atleast_2d(A)
        self.b = np.zeros(self.A.shape[0]) if b is None else np.asarray(b, float)

    def value(self, p):
        return np.asarray(p) @ self.A.T + self.b

    def jacobian(self, p):
        p = np.asarray(p)
        return np.broadcast_to(self.A, p.shape[:-1] + self.A.shape)


class Wavy:
    """Smooth nonlinear map R^2 -> R^3 for oracle comparisons."""

    def __init__(self, rng):
        self.W = rng.normal(size=(3, 2)) * 1.5
        self.c = rng.normal(size=3)

    def value(self, p):
        z = np.asarray(p) @ self.W.T + self.c
        return np.sin(z) + 0.5 * z

    def jacobian(self, p):
        z = np.asarray(p) @ self.W.T + self.c
        return (np.cos(z) + 0.5)[..., None] * self.W


def unit_box_problem(y, cov=None, **kw):
    y = np.atleast_1d(y)
    cov = np.eye(y.size) if cov is None else cov
    d = kw.pop("d", 2)
    return InverseProblem(y, cov, np.zeros(d), np.ones(d), **kw)


class TestObjective:
    def test_perfect_fit(self):
        prob = unit_box_problem([0.3, 0.4])
        assert objective(prob, Linear(np.eye(2)), [0.3, 0.4]) == 0.0

    def test_unit_residual(self):
        prob = InverseProblem([1.0], [[1.0]], [0.0], [1.0])
        assert objective(prob, Linear([[1.0]]), [0.0]) == pytest.approx(0.5)

    def test_matches_direct_formula(self, rng):
        for _ in range(20):
            model = Wavy(rng)
            A = rng.normal(size=(3, 3))
            S = A @ A.T + 0.1 * np.eye(3)
            Sp = np.diag(rng.uniform(0.5, 2.0, 2))
            p0, p, y = rng.random(2), rng.random(2), rng.normal(size=3)
            prob = unit_box_problem(y, S, prior_cov=Sp, prior_mean=p0)
            r = model.value(p) - y
            expected = 0.5 * r @ np.linalg.solve(S, r) + 0.5 * (p - p0) @ np.linalg.solve(Sp, p - p0)
            assert objective(prob, model, p) == pytest.approx(expected, rel=1e-12)

    def test_batch(self, rng):
        model = Wavy(rng)
        prob = unit_box_problem(rng.normal(size=3), np.eye(3))
        P = rng.random((4, 2))
        np.testing.assert_allclose(objective(prob, model, P), [objective(prob, model, p) for p in P], rtol=1e-14)


class TestGaussNewton:
    def test_identity_model_one_step(self):
        prob = unit_box_problem([0.3, 0.8])
        res = gauss_newton_solve(prob, Linear(np.eye(2)), [0.9, 0.1])
        np.testing.assert_allclose(res.p_map, [0.3, 0.8], atol=1e-15)
        assert res.converged
        assert res.iterations <= 2  # one step plus the convergence check

    def test_box_projection(self):
        prob = unit_box_problem([1.4, 0.5])
        res = gauss_newton_solve(prob, Linear(np.eye(2)), [0.2, 0.2])
        np.testing.assert_allclose(res.p_map, [1.0, 0.5], atol=1e-12)
        assert res.converged

    def test_singular_normal_matrix(self):
        prob = unit_box_problem([0.5], d=2)
        with pytest.raises(SingularNormalMatrix):
            gauss_newton_solve(prob, Linear([[1.0, 1.0]]), [0.3, 0.3])

    def test_prior_regularizes_rank_deficiency(self):
        prob = unit_box_problem([0.5], d=2, prior_cov=np.eye(2), prior_mean=[0.5, 0.5])
        res = gauss_newton_solve(prob, Linear([[1.0, 1.0]]), [0.3, 0.3])
        # closed form: (A^T A + I) p = A^T y + p0
        A = np.array([[1.0, 1.0]])
        expected = np.linalg.solve(A.T @ A + np.eye(2), A.T @ [0.5] + 0.5)
        np.testing.assert_allclose(res.p_map, expected, atol=1e-10)

    def test_objective_never_increases(self, rng):
        for _ in range(10):
            model = Wavy(rng)
            prob = unit_box_problem(model.value(rng.random(2)) + 0.1 * rng.normal(size=3), np.eye(3))
            start = rng.random((1, 2))
            values = [objective(prob, model, start[0])]
            for k in range(1, 15):
                sol = gauss_newton_batch(prob, model, prob.measurement[None], start, max_iter=k)
                values.append(sol.objective[0])
            assert np.all(np.diff(values) <= 1e-15 * max(values))

    def test_grid_oracle(self, rng):
        t = (np.arange(200) + 0.5) / 200
        grid = np.stack(np.meshgrid(t, t, indexing="ij"), -1).reshape(-1, 2)
        for _ in range(10):
            model = Wavy(rng)
            prob = unit_box_problem(model.value(rng.random(2)) + 0.2 * rng.normal(size=3), 0.1 * np.eye(3))
            res = multistart_solve(prob, model)
            assert res.objective <= objective(prob, model, grid).min() + 1e-12

    def test_interior_minimum_is_stationary(self, rng):
        model = Wavy(rng)
        p_true = np.array([0.4, 0.6])
        prob = unit_box_problem(model.value(p_true), np.eye(3))
        res = multistart_solve(prob, model)
        J = model.jacobian(res.p_map)
        grad = J.T @ prob.likelihood_prec @ (model.value(res.p_map) - prob.measurement)
        assert np.linalg.norm(grad) <= 1e-6
        np.testing.assert_allclose(res.p_map, p_true, atol=1e-8)

    def test_start_grid_is_cell_centred(self):
        g = start_grid([0, 0], [1, 2], 2)
        np.testing.assert_allclose(g, [[0.25, 0.5], [0.25, 1.5], [0.75, 0.5], [0.75, 1.5]])


class TestLaplace:
    class ScalarSurrogate(Linear):
        def __init__(self, var):
            super().__init__([[1.0]])
            self.var = var

        def variance(self, P):
            return np.full(len(P), self.var)

    def test_scalar_closed_form(self):
        prob = InverseProblem([0.3], [[0.04]], [0.0], [1.0])
        std = laplace_covariance(prob, self.ScalarSurrogate(0.09), [0.3])
        assert std[0] == pytest.approx(math.sqrt(0.04 + 0.09), rel=1e-14)

    def test_noiseless_surrogate_limit(self, rng):
        J = rng.normal(size=(3, 2))
        S = np.diag(rng.uniform(0.01, 0.1, 3))
        prob = unit_box_problem(np.zeros(3), S)
        classical = np.sqrt(np.diag(np.linalg.inv(J.T @ np.linalg.inv(S) @ J)))
        np.testing.assert_allclose(laplace_covariance(prob, Linear(J), [0.5, 0.5]), classical, rtol=1e-12)

    def test_surrogate_noise_widens(self):
        forward = ParabolicCylinderModel(noise="exact")
        pts = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5], [0.2, 0.8], [0.8, 0.3]], float)
        cov = 1e-2 * np.diag([1.0, 0.1, 1.0])
        prob = InverseProblem(forward.value([0.5, 0.5]), cov, [0, 0], [1, 1])
        loose = fit(TrainingData(Design(pts, np.full(7, 0.1), [0, 0], [1, 1]), forward.value(pts)),
                    Hyperparameters(5.0, [0.8, 0.8]))
        tight = fit(TrainingData(Design(pts, np.full(7, 1e-4), [0, 0], [1, 1]), forward.value(pts)),
                    Hyperparameters(5.0, [0.8, 0.8]))
        s_tight = laplace_covariance(prob, tight, [0.5, 0.5])
        assert np.all(laplace_covariance(prob, loose, [0.5, 0.5]) > s_tight)
        # near-exact training data: surrogate variance is negligible against the likelihood
        J = tight.jacobian(np.array([0.5, 0.5]))
        classical = np.sqrt(np.diag(np.linalg.inv(J.T @ np.linalg.inv(cov) @ J)))
        np.testing.assert_allclose(s_tight, classical, rtol=1e-3)
