"""Goal-oriented error quantification for surrogate-based parameter identification.

The surrogate error is measured by its effect on the identified parameter:
the local error density is an error-transport factor (how strongly output
errors move the Gauss-Newton estimate) times a statistical surrogate error
level derived from the GP predictive standard deviations.  Integrating its
q-th power over the parameter box gives the global error ``E``.

For the accuracy allocation the global error is re-expressed as a function
of the information weights ``v_i = eps_i**-2`` of a fixed point set, with
transport factors frozen.  In those coordinates the GP posterior variance at
any node is convex and decreasing in every ``v_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.stats import qmc

from .exceptions import InvalidRegime, SingularTransport
from .gp import Hyperparameters, SurrogateModel, kernel_matrix

EPSILON_MODES = ("trace", "chi-median")
RELATIVE_REGULARIZATION = 1e-8


@dataclass(frozen=True)
class ErrorModelConfig:
    q: float = 2.0
    alpha: float = 0.0
    beta: float = 0.0
    c2: Optional[float] = None
    regularization: Optional[float] = None
    epsilon_mode: str = "trace"
    integration: str = "grid"
    grid_points: int = 25
    mc_points: int = 10000
    mc_seed: int = 0

    def __post_init__(self):
        if self.q < 2:
            raise ValueError("q must be at least 2")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.beta > 0 and not (self.c2 and self.c2 > 0):
            raise ValueError("beta > 0 needs a positive second-derivative bound c2")
        if self.regularization is not None and self.regularization < 0:
            raise ValueError("regularization must be non-negative")
        if self.epsilon_mode not in EPSILON_MODES:
            raise ValueError(f"epsilon_mode must be one of {EPSILON_MODES}")
        if self.integration not in ("grid", "mc"):
            raise ValueError("integration must be 'grid' or 'mc'")
        if self.grid_points < 1 or self.mc_points < 1:
            raise ValueError("need at least one integration node")

    def nodes(self, lower, upper) -> np.ndarray:
        """Integration nodes: cell-centred equidistant grid or uniform MC points."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        d = lower.size
        if self.integration == "grid":
            t = (np.arange(self.grid_points) + 0.5) / self.grid_points
            mesh = np.meshgrid(*([t] * d), indexing="ij")
            unit = np.stack([g.ravel() for g in mesh], axis=1)
        else:
            unit = np.random.default_rng(self.mc_seed).random((self.mc_points, d))
        return lower + unit * (upper - lower)


@dataclass(frozen=True)
class BoundConstants:
    """First/second derivative bounds of the model and the minimal eigenvalue
    of the Gauss-Newton matrix at the identified parameter."""

    c1: float
    c2: float
    l_min: float

    def __post_init__(self):
        if min(self.c1, self.c2, self.l_min) <= 0:
            raise ValueError("bound constants must be positive")


def _inv_cov(sigma_l) -> np.ndarray:
    sigma_l = np.atleast_2d(np.asarray(sigma_l, dtype=float))
    return linalg.cho_solve(linalg.cho_factor(sigma_l), np.eye(sigma_l.shape[0]))


def transport_factor(jac, sigma_l, lam: Optional[float] = None) -> np.ndarray:
    """Spectral norm of ``(J^T S^-1 J + lam I)^-1 J^T S^-1`` for one or many
    Jacobians ``J`` of shape (m, d) or (N, m, d).

    ``lam=None`` uses ``1e-8 * ||J^T S^-1 J||_2`` per Jacobian.
    """
    jac = np.asarray(jac, dtype=float)
    single = jac.ndim == 2
    J = jac[None] if single else jac
    prec = _inv_cov(sigma_l)
    JtS = np.einsum("nmd,mk->ndk", J, prec)
    G = JtS @ J
    d = G.shape[-1]
    if lam is None:
        gnorm = np.linalg.norm(G, 2, axis=(1, 2))
        lam_arr = RELATIVE_REGULARIZATION * gnorm
        lam_arr[lam_arr == 0] = np.finfo(float).tiny
    else:
        lam_arr = np.full(J.shape[0], float(lam))
    A = G + lam_arr[:, None, None] * np.eye(d)
    if lam is not None and lam == 0:
        eig = np.linalg.eigvalsh(A)
        if np.any(eig[:, 0] <= 1e-14 * np.maximum(eig[:, -1], np.finfo(float).tiny)):
            raise SingularTransport("singular J^T S^-1 J; retry with lam > 0")
    M = np.linalg.solve(A, JtS)
    w = np.linalg.norm(M, 2, axis=(1, 2))
    return w[0] if single else w


def transport_weight(model: SurrogateModel, sigma_l, p, lam: Optional[float] = None):
    return transport_factor(model.predict_gradient(p), sigma_l, lam)


def epsilon_from_std(std, mode: str = "trace", q: float = 2.0):
    """Surrogate error level from per-component standard deviations (last axis)."""
    std = np.asarray(std, dtype=float)
    if mode == "trace":
        return (std**q).sum(-1) ** (1.0 / q)
    if mode == "chi-median":
        m = std.shape[-1]
        return math.sqrt(m * (1.0 - 2.0 / (9.0 * m)) ** 3) * np.sqrt((std**2).sum(-1))
    raise ValueError(f"unknown epsilon mode {mode!r}")


def surrogate_epsilon(model: SurrogateModel, p, mode: str = "trace", q: float = 2.0):
    return epsilon_from_std(model.predict(p)[1], mode, q)


def epsilon_power_factor(m: int, mode: str, q: float) -> float:
    """``kappa`` with ``eps**q = kappa * sigma**q`` when all m components share
    the variance ``sigma**2``."""
    if mode == "trace":
        return float(m)
    return (m * m * (1.0 - 2.0 / (9.0 * m)) ** 3) ** (q / 2.0)


def local_error_density(model: SurrogateModel, sigma_l, cfg: ErrorModelConfig, p):
    """Acquisition value ``w(p) * eps(p)`` with trace-mode, q=2 error level."""
    w = transport_factor(model.predict_gradient(p), sigma_l, cfg.regularization)
    return w * epsilon_from_std(model.predict(p)[1], "trace", 2.0)


def radius_bound(eps, eps_prime, consts: BoundConstants, sigma_l, exact: bool = False) -> float:
    """Parameter error radius for a surrogate with value/derivative errors
    ``eps``/``eps_prime``; the simplified form is linear in both."""
    sinv = float(np.linalg.norm(_inv_cov(sigma_l), 2))
    c1, c2, L = consts.c1, consts.c2, consts.l_min
    if not exact:
        return 12.0 / L * sinv * c1 * eps + eps_prime / c2
    den = L - 3.0 * sinv * c1 * eps_prime
    if den <= 0:
        raise InvalidRegime("L - 3 ||S^-1|| C1 eps' must be positive")
    return (3.0 * sinv * (eps_prime + c1) * eps + L * eps_prime / c2) / den


def unavoidable_error(consts: BoundConstants, sigma_l) -> float:
    sigma_l = np.atleast_2d(np.asarray(sigma_l, dtype=float))
    sinv = float(np.linalg.norm(_inv_cov(sigma_l), 2))
    return 3.0 * consts.c1 / consts.l_min * sinv * math.sqrt(float(np.linalg.norm(sigma_l, 2)))


@dataclass
class NodeTable:
    """Per-node quantities of the error model for one fitted surrogate."""

    nodes: np.ndarray
    cell_volume: float
    transport: np.ndarray
    weight: np.ndarray
    variance: np.ndarray
    epsilon: np.ndarray
    acquisition: np.ndarray
    q: float

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    def error(self) -> float:
        return float(self.cell_volume * np.sum((self.weight * self.epsilon) ** self.q)) ** (
            1.0 / self.q
        )


def node_table(model: SurrogateModel, sigma_l, cfg: ErrorModelConfig, nodes=None) -> NodeTable:
    design = model.data.design
    if nodes is None:
        nodes = cfg.nodes(design.lower, design.upper)
    nodes = np.atleast_2d(nodes)
    transport = transport_factor(model.predict_gradient(nodes), sigma_l, cfg.regularization)
    weight = transport
    if cfg.beta > 0:
        weight = weight + cfg.beta / cfg.c2
    if cfg.alpha > 0:
        sigma_l = np.atleast_2d(np.asarray(sigma_l, dtype=float))
        e0 = transport * math.sqrt(float(np.linalg.norm(sigma_l, 2)))
        weight = weight / (1.0 + cfg.alpha * e0)
    var = model.variance(nodes)
    std = np.sqrt(var)[:, None] * np.ones(model.n_outputs)
    eps = epsilon_from_std(std, cfg.epsilon_mode, cfg.q)
    acq = transport * epsilon_from_std(std, "trace", 2.0)
    return NodeTable(
        nodes=nodes,
        cell_volume=design.volume / nodes.shape[0],
        transport=transport,
        weight=weight,
        variance=var,
        epsilon=eps,
        acquisition=acq,
        q=cfg.q,
    )


def global_error(model: SurrogateModel, sigma_l, cfg: ErrorModelConfig, nodes=None):
    """Global error ``E`` and the node table it was computed from."""
    table = node_table(model, sigma_l, cfg, nodes)
    return table.error(), table


class AccuracyObjective:
    """``E~(v) = E(v)**q`` over a fixed point set as a function of ``v = eps**-2``.

    Transport weights and the kernel are frozen; only the noise levels vary.
    ``v_i = 0`` means point ``i`` is not evaluated at all.  Uses the form
    ``sigma^2(p) = k(p,p) - (S k_p)^T (I + S K S)^-1 (S k_p)``, ``S = diag(sqrt v)``,
    which stays well defined at ``v_i = 0``.
    """

    def __init__(
        self,
        hyper: Hyperparameters,
        points,
        table: NodeTable,
        n_outputs: int,
        epsilon_mode: str = "trace",
    ):
        self.hyper = hyper
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.q = table.q
        self.kxx = kernel_matrix(self.points, self.points, hyper)
        self.kxn = kernel_matrix(self.points, table.nodes, hyper)
        self.prior_var = hyper.signal_variance
        self.node_weight = table.cell_volume * table.weight**self.q
        self.kappa = epsilon_power_factor(n_outputs, epsilon_mode, self.q)
        self._cache_key = None
        self._cache = None

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def _state(self, v):
        v = np.asarray(v, dtype=float)
        key = v.tobytes()
        if key == self._cache_key:
            return self._cache
        if np.any(v < 0):
            raise ValueError("information weights must be non-negative")
        s = np.sqrt(v)
        B = np.eye(self.size) + s[:, None] * self.kxx * s[None, :]
        chol = linalg.cho_factor(B, lower=True, check_finite=False)
        S_kxn = s[:, None] * self.kxn
        Z = linalg.cho_solve(chol, S_kxn, check_finite=False)
        var = np.maximum(self.prior_var - (S_kxn * Z).sum(0), 0.0)
        # posterior cross-covariance between latent values at points and nodes
        cross = self.kxn - self.kxx @ (s[:, None] * Z)
        self._cache_key, self._cache = key, (s, chol, var, cross)
        return self._cache

    def _phi(self, x, order: int):
        h = self.q / 2.0
        x = np.maximum(x, 1e-300)
        if order == 0:
            return self.kappa * x**h
        if order == 1:
            return self.kappa * h * x ** (h - 1)
        return self.kappa * h * (h - 1) * x ** (h - 2)

    def variance(self, v) -> np.ndarray:
        return self._state(v)[2]

    def value(self, v) -> float:
        var = self._state(v)[2]
        if self.q == 2:
            return float(self.node_weight @ (self.kappa * var))
        return float(self.node_weight @ self._phi(var, 0))

    def gradient(self, v) -> np.ndarray:
        _, _, var, cross = self._state(v)
        coef = self.node_weight * (self.kappa if self.q == 2 else self._phi(var, 1))
        return -(cross**2) @ coef

    def posterior_covariance(self, v) -> np.ndarray:
        s, chol, _, _ = self._state(v)
        SK = s[:, None] * self.kxx
        cov = self.kxx - SK.T @ linalg.cho_solve(chol, SK, check_finite=False)
        return 0.5 * (cov + cov.T)

    def hessian(self, v) -> np.ndarray:
        _, _, var, cross = self._state(v)
        coef = self.node_weight * (self.kappa if self.q == 2 else self._phi(var, 1))
        H = 2.0 * ((cross * coef) @ cross.T) * self.posterior_covariance(v)
        if self.q != 2:
            g = cross**2
            H += (g * (self.node_weight * self._phi(var, 2))) @ g.T
        return 0.5 * (H + H.T)


def global_error_gradient(
    model: SurrogateModel,
    sigma_l,
    cfg: ErrorModelConfig,
    v,
    candidates=None,
    table: Optional[NodeTable] = None,
) -> np.ndarray:
    """Gradient of ``E~`` with respect to ``v`` over the design points of
    ``model`` followed by ``candidates``; transport weights frozen."""
    if table is None:
        table = node_table(model, sigma_l, cfg)
    points = model.points
    if candidates is not None and len(candidates):
        points = np.vstack([points, np.atleast_2d(candidates)])
    obj = AccuracyObjective(model.hyper, points, table, model.n_outputs, cfg.epsilon_mode)
    return obj.gradient(v)
