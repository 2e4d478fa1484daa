"""MAP parameter identification by projected Gauss-Newton, with Laplace UQ.

Models are duck-typed: anything with ``value(P)`` and ``jacobian(P)`` that
accept one point (d,) or a batch (N, d) works, e.g. a fitted
:class:`~gpdesign.gp.SurrogateModel` or a forward model's exact map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .exceptions import SingularNormalMatrix

ARMIJO_C = 1e-4
ARMIJO_FACTOR = 0.5
MAX_HALVINGS = 30
STEP_TOL = 1e-10
DECREASE_TOL = 1e-14


@dataclass
class InverseProblem:
    """Gaussian likelihood around ``measurement`` with optional Gaussian prior.

    ``prior_cov=None`` means an improper flat prior (zero prior precision).
    """

    measurement: np.ndarray
    likelihood_cov: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    prior_cov: Optional[np.ndarray] = None
    prior_mean: Optional[np.ndarray] = None

    def __post_init__(self):
        self.measurement = np.atleast_1d(np.asarray(self.measurement, dtype=float))
        self.likelihood_cov = np.atleast_2d(np.asarray(self.likelihood_cov, dtype=float))
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        m, d = self.measurement.size, self.lower.size
        if self.likelihood_cov.shape != (m, m):
            raise ValueError("likelihood covariance must be m x m")
        try:
            self.likelihood_prec = linalg.cho_solve(linalg.cho_factor(self.likelihood_cov), np.eye(m))
        except linalg.LinAlgError as exc:
            raise ValueError("likelihood covariance must be SPD") from exc
        if self.prior_cov is None:
            self.prior_prec = np.zeros((d, d))
        else:
            self.prior_cov = np.atleast_2d(np.asarray(self.prior_cov, dtype=float))
            try:
                self.prior_prec = linalg.cho_solve(linalg.cho_factor(self.prior_cov), np.eye(d))
            except linalg.LinAlgError as exc:
                raise ValueError("prior covariance must be SPD") from exc
        self.prior_mean = np.zeros(d) if self.prior_mean is None else np.asarray(self.prior_mean, dtype=float)

    @property
    def improper_prior(self) -> bool:
        return self.prior_cov is None

    def with_measurement(self, measurement) -> "InverseProblem":
        return InverseProblem(measurement, self.likelihood_cov, self.lower, self.upper,
                              self.prior_cov, self.prior_mean)


@dataclass
class ReconstructionResult:
    p_map: np.ndarray
    objective: float
    iterations: int
    converged: bool
    stds: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "p_map": self.p_map.tolist(),
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "stds": None if self.stds is None else self.stds.tolist(),
        }


def _objective_batch(prob, Y, P, values):
    r = values - Y
    dp = P - prob.prior_mean
    return 0.5 * np.einsum("bi,ij,bj->b", r, prob.likelihood_prec, r) + 0.5 * np.einsum(
        "bi,ij,bj->b", dp, prob.prior_prec, dp
    )


def objective(prob: InverseProblem, model, p):
    """Negative log posterior up to a constant; ``p`` may be a batch."""
    P = np.asarray(p, dtype=float)
    single = P.ndim == 1
    P = np.atleast_2d(P)
    Y = np.broadcast_to(prob.measurement, (P.shape[0], prob.measurement.size))
    val = _objective_batch(prob, Y, P, np.atleast_2d(model.value(P)))
    return float(val[0]) if single else val


@dataclass
class BatchSolution:
    p: np.ndarray
    objective: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    singular: np.ndarray


def gauss_newton_batch(prob: InverseProblem, model, measurements, starts, max_iter: int = 100) -> BatchSolution:
    """Projected Gauss-Newton with Armijo backtracking for many independent
    problems that share likelihood, prior and domain but not measurements."""
    Y = np.atleast_2d(np.asarray(measurements, dtype=float))
    P = np.clip(np.atleast_2d(np.asarray(starts, dtype=float)).copy(), prob.lower, prob.upper)
    B, d = P.shape
    if Y.shape[0] == 1 and B > 1:
        Y = np.repeat(Y, B, axis=0)
    S = prob.likelihood_prec
    f = _objective_batch(prob, Y, P, np.atleast_2d(model.value(P)))
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    singular = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    # problems whose projected Newton step failed fall back to one scaled
    # projected-gradient step
    gradient_step = np.zeros(B, dtype=bool)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Pa = P[idx]
        val = np.atleast_2d(model.value(Pa))
        J = np.asarray(model.jacobian(Pa)).reshape(idx.size, -1, d)
        r = val - Y[idx]
        JtS = np.einsum("bmd,mk->bdk", J, S)
        A = JtS @ J + prob.prior_prec
        grad = np.einsum("bdk,bk->bd", JtS, r) + (Pa - prob.prior_mean) @ prob.prior_prec
        eig = np.linalg.eigvalsh(A)
        bad = eig[:, 0] <= 1e-13 * np.maximum(eig[:, -1], 1e-300)
        if np.any(bad):
            singular[idx[bad]] = True
            active[idx[bad]] = False
            keep = ~bad
            idx, Pa, A, grad, eig = idx[keep], Pa[keep], A[keep], grad[keep], eig[keep]
            if idx.size == 0:
                break
        # bound-active coordinates (at a face with the gradient pointing out)
        # are frozen; the Newton system is solved for the remaining ones
        fixed = ((Pa <= prob.lower) & (grad > 0)) | ((Pa >= prob.upper) & (grad < 0))
        keep2 = ~fixed[:, :, None] & ~fixed[:, None, :]
        A_red = np.where(keep2, A, 0.0) + fixed[:, :, None] * np.eye(d)
        step = -np.linalg.solve(A_red, np.where(fixed, 0.0, grad)[..., None])[..., 0]
        use_grad = gradient_step[idx]
        step[use_grad] = -grad[use_grad] / eig[use_grad, -1:]
        full = np.clip(Pa + step, prob.lower, prob.upper) - Pa
        small = np.linalg.norm(full, axis=1) <= STEP_TOL * (1 + np.linalg.norm(Pa, axis=1))

        lam = np.ones(idx.size)
        accepted = np.zeros(idx.size, dtype=bool)
        newP = Pa.copy()
        newf = f[idx].copy()
        pending = ~small
        for _ in range(MAX_HALVINGS + 1):
            j = np.flatnonzero(pending)
            if j.size == 0:
                break
            trial = np.clip(Pa[j] + lam[j, None] * step[j], prob.lower, prob.upper)
            ft = _objective_batch(prob, Y[idx[j]], trial, np.atleast_2d(model.value(trial)))
            ok = ft <= f[idx[j]] + ARMIJO_C * np.einsum("bd,bd->b", grad[j], trial - Pa[j])
            ok &= ft <= f[idx[j]]
            acc = j[ok]
            newP[acc] = trial[ok]
            newf[acc] = ft[ok]
            accepted[acc] = True
            pending[acc] = False
            lam[j[~ok]] *= ARMIJO_FACTOR
        decrease = f[idx] - newf
        P[idx[accepted]] = newP[accepted]
        f[idx[accepted]] = newf[accepted]
        iters[idx[accepted]] += 1
        done = small | (accepted & (decrease < DECREASE_TOL))
        converged[idx[done]] = True
        retry = ~small & ~accepted & ~use_grad
        gradient_step[idx] = retry
        # line search exhausted without decrease: stationary up to round-off
        stuck = ~small & ~accepted & use_grad
        converged[idx[stuck]] = np.linalg.norm(full[stuck], axis=1) <= 1e-6 * (1 + np.linalg.norm(Pa[stuck], axis=1))
        active[idx[done | stuck]] = False
    return BatchSolution(P, f, iters, converged, singular)


def gauss_newton_solve(prob: InverseProblem, model, p_init, max_iter: int = 100) -> ReconstructionResult:
    sol = gauss_newton_batch(prob, model, prob.measurement[None], np.asarray(p_init, dtype=float)[None], max_iter)
    if sol.singular[0]:
        raise SingularNormalMatrix("Gauss-Newton matrix is singular (rank-deficient Jacobian)")
    return ReconstructionResult(sol.p[0], float(sol.objective[0]), int(sol.iterations[0]), bool(sol.converged[0]))


def start_grid(lower, upper, per_axis: int) -> np.ndarray:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    t = (np.arange(per_axis) + 0.5) / per_axis
    mesh = np.meshgrid(*([t] * lower.size), indexing="ij")
    return lower + np.stack([g.ravel() for g in mesh], axis=1) * (upper - lower)


def multistart_batch(prob: InverseProblem, model, measurements, n_start: int = 5,
                     grid: int = 9, max_iter: int = 100) -> BatchSolution:
    """For each measurement, start Gauss-Newton from the ``n_start`` best nodes
    of a coarse grid and keep the best non-singular result."""
    Y = np.atleast_2d(np.asarray(measurements, dtype=float))
    nodes = start_grid(prob.lower, prob.upper, grid)
    vals = np.atleast_2d(model.value(nodes))
    r = vals[None, :, :] - Y[:, None, :]
    fgrid = 0.5 * np.einsum("bgi,ij,bgj->bg", r, prob.likelihood_prec, r)
    dp = nodes - prob.prior_mean
    fgrid += 0.5 * np.einsum("gi,ij,gj->g", dp, prob.prior_prec, dp)[None]
    k = min(n_start, nodes.shape[0])
    best = np.argsort(fgrid, axis=1, kind="stable")[:, :k]
    starts = nodes[best].reshape(-1, nodes.shape[1])
    sol = gauss_newton_batch(prob, model, np.repeat(Y, k, axis=0), starts, max_iter)
    B = Y.shape[0]
    obj = np.where(sol.singular, np.inf, sol.objective).reshape(B, k)
    pick = np.argmin(obj, axis=1)
    flat = np.arange(B) * k + pick
    singular = np.all(sol.singular.reshape(B, k), axis=1)
    return BatchSolution(sol.p[flat], sol.objective[flat], sol.iterations[flat], sol.converged[flat], singular)


def multistart_solve(prob: InverseProblem, model, n_start: int = 5, grid: int = 9,
                     max_iter: int = 100) -> ReconstructionResult:
    sol = multistart_batch(prob, model, prob.measurement[None], n_start, grid, max_iter)
    if sol.singular[0]:
        raise SingularNormalMatrix("every start hit a singular Gauss-Newton matrix")
    return ReconstructionResult(sol.p[0], float(sol.objective[0]), int(sol.iterations[0]), bool(sol.converged[0]))


def laplace_covariance(prob: InverseProblem, model, p_map) -> np.ndarray:
    """Marginal posterior standard deviations at ``p_map``.

    The surrogate's predictive variances (if ``model`` has ``variance``) are
    added to the likelihood covariance.
    """
    p_map = np.asarray(p_map, dtype=float)
    J = np.asarray(model.jacobian(p_map))
    cov = prob.likelihood_cov.copy()
    if hasattr(model, "variance"):
        cov += np.diag(np.broadcast_to(model.variance(p_map[None])[0], cov.shape[0]))
    A = J.T @ linalg.solve(cov, J, assume_a="pos") + prob.prior_prec
    try:
        chol = linalg.cho_factor(A)
    except linalg.LinAlgError as exc:
        raise SingularNormalMatrix("Laplace precision matrix is singular") from exc
    inv = linalg.cho_solve(chol, np.eye(A.shape[0]))
    return np.sqrt(np.maximum(np.diag(inv), 0.0))
