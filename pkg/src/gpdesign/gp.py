"""Heteroscedastic simple-kriging Gaussian process.

Every training point carries its own noise variance ``eps_i**2`` taken from
the tolerance the simulator was asked to meet.  All output components share
one design and one set of squared-exponential hyperparameters, so the
predictive variance is identical across components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg, optimize
from scipy.stats import qmc

from .exceptions import FactorizationFailure

JITTER_START = 1e-10
JITTER_MAX = 1e-6
MIN_SEPARATION_FACTOR = 1e-4


@dataclass(frozen=True)
class Hyperparameters:
    """Signal variance and per-coordinate lengthscales of the SE kernel."""

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        if self.signal_variance <= 0 or np.any(ls <= 0):
            raise ValueError("hyperparameters must be strictly positive")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.signal_variance], self.lengthscales])

    @classmethod
    def from_array(cls, arr) -> "Hyperparameters":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[0], arr[1:].copy())

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": self.lengthscales.tolist(),
        }


@dataclass(frozen=True)
class HyperparameterBounds:
    """Box constraints on ``[signal_variance, l_1, ..., l_d]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(lo <= 0) or np.any(lo > hi):
            raise ValueError("inconsistent hyperparameter bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def clip(self, h: Hyperparameters) -> Hyperparameters:
        return Hyperparameters.from_array(np.clip(h.as_array(), self.lower, self.upper))

    def contains(self, h: Hyperparameters) -> bool:
        a = h.as_array()
        return bool(np.all(a >= self.lower) and np.all(a <= self.upper))

    @classmethod
    def default(cls, data: "TrainingData") -> "HyperparameterBounds":
        """Signal variance within 1e-4..1e4 of the data variance, lengthscales
        within 1e-2..1e1 of the domain width."""
        y = data.values
        scale = float(np.var(y)) if y.size > 1 else 0.0
        if not scale > 0:
            scale = float(np.mean(y**2)) if y.size else 0.0
        if not scale > 0:
            scale = 1.0
        width = data.design.upper - data.design.lower
        lo = np.concatenate([[1e-4 * scale], 1e-2 * width])
        hi = np.concatenate([[1e4 * scale], 1e1 * width])
        return cls(lo, hi)


@dataclass
class Design:
    """Evaluation points with per-point tolerances inside a box domain."""

    points: np.ndarray
    tolerances: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        d = self.lower.size
        self.points = np.asarray(self.points, dtype=float).reshape(-1, d)
        self.tolerances = np.asarray(self.tolerances, dtype=float).ravel()
        if self.tolerances.size != self.points.shape[0]:
            raise ValueError("one tolerance per point required")
        if np.any(self.upper <= self.lower):
            raise ValueError("empty domain box")
        if not np.all(np.isfinite(self.tolerances)) or np.any(self.tolerances <= 0):
            raise ValueError("tolerances must be finite and positive")
        if np.any(self.points < self.lower) or np.any(self.points > self.upper):
            raise ValueError("design point outside the domain box")

    @classmethod
    def empty(cls, lower, upper) -> "Design":
        lower = np.asarray(lower, dtype=float)
        return cls(np.empty((0, lower.size)), np.empty(0), lower, upper)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    @property
    def min_separation(self) -> float:
        return MIN_SEPARATION_FACTOR * self.diagonal

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lower) and np.all(p <= self.upper))

    def distance_to(self, p) -> float:
        """Distance from ``p`` to the nearest design point (inf if empty)."""
        if self.n == 0:
            return math.inf
        return float(np.min(np.linalg.norm(self.points - np.asarray(p), axis=1)))

    def is_separated(self) -> bool:
        if self.n < 2:
            return True
        diff = self.points[:, None, :] - self.points[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        return bool(dist.min() >= self.min_separation)

    def extended(self, points, tolerances) -> "Design":
        return Design(
            np.vstack([self.points, np.asarray(points, dtype=float).reshape(-1, self.dim)]),
            np.concatenate([self.tolerances, np.asarray(tolerances, dtype=float).ravel()]),
            self.lower,
            self.upper,
        )

    def with_tolerances(self, tolerances) -> "Design":
        return Design(self.points.copy(), tolerances, self.lower, self.upper)


@dataclass
class TrainingData:
    design: Design
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values.reshape(self.design.n, -1)
        if self.values.shape[0] != self.design.n:
            raise ValueError("one row of values per design point required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("training values must be finite")

    @property
    def n_outputs(self) -> int:
        return self.values.shape[1]


def kernel_eval(p, q, h: Hyperparameters) -> float:
    """Squared-exponential covariance between two points."""
    r = (np.asarray(p, dtype=float) - np.asarray(q, dtype=float)) / h.lengthscales
    return h.signal_variance * math.exp(-0.5 * float(r @ r))


def kernel_matrix(a, b, h: Hyperparameters) -> np.ndarray:
    """Covariance matrix ``k(a_i, b_j)`` for point sets of shape (n, d), (k, d)."""
    a = np.atleast_2d(a) / h.lengthscales
    b = np.atleast_2d(b) / h.lengthscales
    # explicit differences: the expanded |a|^2 + |b|^2 - 2ab form loses digits
    # for nearby points
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return h.signal_variance * np.exp(-0.5 * sq)


def _cholesky(cov: np.ndarray, scale: float):
    """Lower Cholesky factor of ``cov + jitter*scale*I`` with escalating jitter."""
    n = cov.shape[0]
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-12):
        try:
            chol = linalg.cholesky(
                cov + jitter * scale * np.eye(n), lower=True, check_finite=False
            )
            return chol, jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationFailure(
        "covariance not positive definite after maximal jitter; "
        "check for duplicate points or invalid tolerances"
    )


class SurrogateModel:
    """Fitted GP posterior for all output components of one training set.

    Immutable after construction; prediction methods are safe to call from
    several threads.
    """

    def __init__(self, data: TrainingData, hyper: Hyperparameters):
        self.data = data
        self.hyper = hyper
        n = data.design.n
        self.n_outputs = data.n_outputs
        if n:
            cov = kernel_matrix(data.design.points, data.design.points, hyper)
            cov[np.diag_indices(n)] += data.design.tolerances**2
            self._chol, self.jitter = _cholesky(cov, hyper.signal_variance)
            self.alpha = linalg.cho_solve((self._chol, True), data.values, check_finite=False)
        else:
            self._chol = np.empty((0, 0))
            self.jitter = 0.0
            self.alpha = np.empty((0, self.n_outputs))

    @property
    def points(self) -> np.ndarray:
        return self.data.design.points

    @property
    def dim(self) -> int:
        return self.data.design.dim

    def _cross(self, P):
        return kernel_matrix(P, self.points, self.hyper) if self.data.design.n else np.empty((P.shape[0], 0))

    def variance(self, P) -> np.ndarray:
        """Predictive variance (shared by all components), clamped at zero."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        ks = self._cross(P)
        var = np.full(P.shape[0], self.hyper.signal_variance)
        if ks.shape[1]:
            w = linalg.solve_triangular(self._chol, ks.T, lower=True, check_finite=False)
            var -= (w**2).sum(0)
        return np.maximum(var, 0.0)

    def predict(self, p):
        """Predictive mean and standard deviation per output component.

        Accepts one point of shape (d,) or a batch of shape (N, d); returns
        arrays of shape (m,) or (N, m) accordingly.
        """
        P = np.asarray(p, dtype=float)
        single = P.ndim == 1
        P = np.atleast_2d(P)
        ks = self._cross(P)
        mean = ks @ self.alpha if ks.shape[1] else np.zeros((P.shape[0], self.n_outputs))
        std = np.sqrt(self.variance(P))[:, None] * np.ones(self.n_outputs)
        if single:
            return mean[0], std[0]
        return mean, std

    def predict_gradient(self, p) -> np.ndarray:
        """Jacobian of the predictive mean, shape (m, d) or (N, m, d)."""
        P = np.asarray(p, dtype=float)
        single = P.ndim == 1
        P = np.atleast_2d(P)
        if self.data.design.n == 0:
            jac = np.zeros((P.shape[0], self.n_outputs, self.dim))
        else:
            ks = self._cross(P)
            diff = P[:, None, :] - self.points[None, :, :]
            dk = -(diff / self.hyper.lengthscales**2) * ks[:, :, None]
            jac = np.einsum("nid,ij->njd", dk, self.alpha)
        return jac[0] if single else jac

    # inverse-solver protocol
    def value(self, p):
        return self.predict(p)[0]

    def jacobian(self, p):
        return self.predict_gradient(p)


def fit(data: TrainingData, h: Hyperparameters) -> SurrogateModel:
    return SurrogateModel(data, h)


def nlml(data: TrainingData, h: Hyperparameters):
    """Negative log marginal likelihood summed over output components.

    Returns ``(value, gradient)`` with the gradient taken with respect to
    ``[signal_variance, l_1, ..., l_d]``.
    """
    P = data.design.points
    Y = data.values
    n, m = Y.shape
    if n == 0:
        return 0.0, np.zeros(h.dim + 1)
    corr = kernel_matrix(P, P, Hyperparameters(1.0, h.lengthscales))
    noise = data.design.tolerances**2
    cov = h.signal_variance * corr
    cov[np.diag_indices(n)] += noise
    chol, jitter = _cholesky(cov, h.signal_variance)
    alpha = linalg.cho_solve((chol, True), Y, check_finite=False)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    value = 0.5 * float((Y * alpha).sum()) + m * (0.5 * logdet + 0.5 * n * math.log(2 * math.pi))

    cinv = linalg.cho_solve((chol, True), np.eye(n), check_finite=False)
    weight = m * cinv - alpha @ alpha.T
    grad = np.empty(h.dim + 1)
    dsf = corr + jitter * np.eye(n)
    grad[0] = 0.5 * float((weight * dsf).sum())
    base = h.signal_variance * corr
    for k in range(h.dim):
        dk = (P[:, k, None] - P[None, :, k]) ** 2 / h.lengthscales[k] ** 3
        grad[k + 1] = 0.5 * float((weight * base * dk).sum())
    return value, grad


class HyperparameterFit(NamedTuple):
    hyperparameters: Hyperparameters
    value: float
    converged: bool


def _projected_step_norm(theta, grad, lo, hi) -> float:
    return float(np.linalg.norm(np.clip(theta - grad, lo, hi) - theta))


def optimize_hyperparameters(
    data: TrainingData,
    bounds: Optional[HyperparameterBounds] = None,
    init: Optional[Hyperparameters] = None,
    restarts: int = 5,
    seed: int = 0,
    maxiter: int = 200,
    gtol: float = 1e-6,
) -> HyperparameterFit:
    """Minimize the NLML inside a box, in log-coordinates, with restarts.

    The first start is ``init``; the remaining ``restarts - 1`` starts are
    scrambled Halton points in the log-box.  The best iterate is returned
    even if no start reached projected-gradient stationarity.
    """
    if bounds is None:
        bounds = HyperparameterBounds.default(data)
    if init is None:
        width = data.design.upper - data.design.lower
        y2 = float(np.mean(data.values**2)) if data.values.size else 1.0
        init = Hyperparameters(y2 if y2 > 0 else 1.0, 0.3 * width)
    init = bounds.clip(init)
    lo, hi = np.log(bounds.lower), np.log(bounds.upper)

    def objective(theta):
        h = Hyperparameters.from_array(np.exp(theta))
        try:
            val, grad = nlml(data, h)
        except FactorizationFailure:
            return 1e300, np.zeros_like(theta)
        return val, grad * np.exp(theta)

    theta0 = np.log(init.as_array())
    f0, g0 = objective(theta0)
    if np.all(lo == hi) or _projected_step_norm(theta0, g0, lo, hi) <= gtol:
        return HyperparameterFit(init, f0, True)

    starts = [theta0]
    if restarts > 1:
        u = qmc.Halton(lo.size, scramble=True, seed=seed).random(restarts - 1)
        starts.extend(lo + u * (hi - lo))

    best_theta, best_val, best_ok = theta0, f0, False
    for start in starts:
        res = optimize.minimize(
            objective,
            start,
            jac=True,
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
            options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-15},
        )
        if res.fun < best_val:
            _, g = objective(res.x)
            best_theta, best_val = res.x, float(res.fun)
            best_ok = _projected_step_norm(res.x, g, lo, hi) <= gtol or bool(res.success)
    best = Hyperparameters.from_array(np.clip(np.exp(best_theta), bounds.lower, bounds.upper))
    return HyperparameterFit(best, best_val, best_ok)
