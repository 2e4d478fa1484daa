"""Tolerance-controlled forward models.

A forward model returns, for a requested tolerance ``eps``, an approximation
of the exact model output and the work it cost.  Previously computed
evaluations can be continued to a tighter tolerance, paying only the
difference in work.
"""

from __future__ import annotations

import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainViolation, RefinementOrderViolation
from .work import WorkModel


@dataclass(frozen=True)
class Evaluation:
    value: np.ndarray
    eps_achieved: float
    work_charged: float
    surplus: float = 0.0


def _seed_words(*parts) -> list[int]:
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        h.update(np.asarray(part, dtype=float).tobytes())
    return list(np.frombuffer(h.digest(), dtype=np.uint32))


class ForwardModel:
    """Base class; subclasses provide ``value``, ``jacobian`` and the noisy
    ``evaluate_to_tolerance`` / ``refine`` pair."""

    dim: int
    n_outputs: int
    lower: np.ndarray
    upper: np.ndarray
    work_model: WorkModel

    def _check_domain(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape != (self.dim,) or np.any(p < self.lower) or np.any(p > self.upper):
            raise DomainViolation(f"point {p} outside the parameter domain")
        return p

    def value(self, p):
        raise NotImplementedError

    def jacobian(self, p):
        raise NotImplementedError

    def evaluate_to_tolerance(self, p, eps: float) -> Evaluation:
        raise NotImplementedError

    def refine(self, p, eps_old: float, eps_new: float) -> Evaluation:
        raise NotImplementedError


class ParabolicCylinderModel(ForwardModel):
    """Rotated parabolic cylinders ``y_j(p) = (cos a_j (p1+p2) + sin a_j (p2-p1))**2``
    on the unit square, one output per rotation angle (radians)."""

    def __init__(self, angles=(0.0, 2.0, 4.0), noise: str = "gaussian", seed: int = 0,
                 work_model: WorkModel | None = None):
        if noise not in ("gaussian", "exact"):
            raise ValueError("noise must be 'gaussian' or 'exact'")
        self.angles = np.asarray(angles, dtype=float)
        c, s = np.cos(self.angles), np.sin(self.angles)
        # y_j = (a_j . p)^2 with a_j = (c - s, c + s)
        self.directions = np.stack([c - s, c + s], axis=1)
        self.noise = noise
        self.seed = int(seed)
        self.work_model = work_model or WorkModel(exponent=0.5)
        self.dim = 2
        self.n_outputs = self.angles.size
        self.lower = np.zeros(2)
        self.upper = np.ones(2)
        self._draws = defaultdict(int)

    def value(self, p):
        p = np.asarray(p, dtype=float)
        return (p @ self.directions.T) ** 2

    def jacobian(self, p):
        p = np.asarray(p, dtype=float)
        z = p @ self.directions.T
        return 2.0 * z[..., None] * self.directions

    def hessian(self, p=None) -> np.ndarray:
        """Constant second derivatives, shape (m, d, d)."""
        a = self.directions
        return 2.0 * a[:, :, None] * a[:, None, :]

    def _noisy(self, p, eps):
        y = self.value(p)
        if self.noise == "exact":
            return y
        key = (tuple(p), float(eps))
        count = self._draws[key]
        self._draws[key] += 1
        rng = np.random.default_rng([self.seed, *_seed_words(p, eps, count)])
        return y + eps * rng.standard_normal(self.n_outputs)

    def evaluate_to_tolerance(self, p, eps: float) -> Evaluation:
        p = self._check_domain(p)
        if not eps > 0:
            raise ValueError("tolerance must be positive")
        return Evaluation(self._noisy(p, eps), float(eps), self.work_model.work(eps))

    def refine(self, p, eps_old: float, eps_new: float) -> Evaluation:
        p = self._check_domain(p)
        if not eps_new < eps_old:
            raise RefinementOrderViolation("refinement must tighten the tolerance")
        wm = self.work_model
        return Evaluation(self._noisy(p, eps_new), float(eps_new), wm.work(eps_new) - wm.work(eps_old))


class QuantizedLevelModel(ForwardModel):
    """Mock finite-element solver with discrete refinement levels.

    Level ``l`` has tolerance ``eps0 * ratio**l`` and costs the finite-element
    work at that tolerance.  A request is served by the coarsest level that
    meets it, so the achieved tolerance (and the work) can exceed what was
    asked for; the excess work is reported as ``surplus``.  The discretization
    error at a level is a fixed pseudo-random perturbation of that size, so
    re-evaluating a level reproduces its value.
    """

    def __init__(self, base: ForwardModel, eps0: float = 0.1, ratio: float = 0.5,
                 order: int = 2, space_dim: int = 2, max_level: int = 60, seed: int = 0):
        if not 0 < ratio < 1:
            raise ValueError("level ratio must lie in (0, 1)")
        if not eps0 > 0:
            raise ValueError("eps0 must be positive")
        self.base = base
        self.eps0 = float(eps0)
        self.ratio = float(ratio)
        self.max_level = int(max_level)
        self.seed = int(seed)
        self.work_model = WorkModel.finite_element(order, space_dim)
        self.dim = base.dim
        self.n_outputs = base.n_outputs
        self.lower = base.lower
        self.upper = base.upper

    def level_tolerance(self, level: int) -> float:
        return self.eps0 * self.ratio**level

    def level_for(self, eps: float) -> int:
        """Coarsest level whose tolerance does not exceed ``eps``."""
        if eps >= self.eps0:
            return 0
        level = math.ceil(math.log(eps / self.eps0) / math.log(self.ratio) - 1e-12)
        while self.level_tolerance(level) > eps:
            level += 1
        while level > 0 and self.level_tolerance(level - 1) <= eps:
            level -= 1
        if level > self.max_level:
            raise ValueError(f"tolerance {eps} finer than the finest level")
        return level

    def level_work(self, level: int) -> float:
        return self.work_model.work(self.level_tolerance(level))

    def value(self, p):
        return self.base.value(p)

    def jacobian(self, p):
        return self.base.jacobian(p)

    def _solution(self, p, level):
        rng = np.random.default_rng([self.seed, *_seed_words(p, level)])
        return self.base.value(p) + self.level_tolerance(level) * rng.standard_normal(self.n_outputs)

    def evaluate_to_tolerance(self, p, eps: float) -> Evaluation:
        p = self._check_domain(p)
        level = self.level_for(eps)
        work = self.level_work(level)
        surplus = work - self.work_model.work(eps)
        return Evaluation(self._solution(p, level), self.level_tolerance(level), work, surplus)

    def refine(self, p, eps_old: float, eps_new: float) -> Evaluation:
        p = self._check_domain(p)
        if not eps_new < eps_old:
            raise RefinementOrderViolation("refinement must tighten the tolerance")
        old, new = self.level_for(eps_old), self.level_for(eps_new)
        work = self.level_work(new) - self.level_work(old)
        requested = self.work_model.work(eps_new) - self.work_model.work(eps_old)
        return Evaluation(self._solution(p, new), self.level_tolerance(new), work, work - requested)
