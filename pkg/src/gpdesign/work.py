"""Work models and incremental budget control."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import RefinementOrderViolation
from .gp import Design


@dataclass(frozen=True)
class WorkModel:
    """Cost of one evaluation at tolerance ``eps``: ``scale * eps**(-2*exponent)``.

    In information coordinates ``v = eps**-2`` this is ``scale * v**exponent``.
    Work is floored at ``w_min`` per evaluation (coarsest-grid cost).
    """

    exponent: float = 0.5
    scale: float = 1.0
    w_min: float = 1.0
    eps_max: Optional[float] = None

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError("work exponent must be positive")
        if not self.scale > 0:
            raise ValueError("work scale must be positive")

    @classmethod
    def finite_element(cls, order: int, space_dim: int, w_min: float = 1.0) -> "WorkModel":
        """Multigrid finite elements: ``W = (r/d) eps**(-d/r)``."""
        return cls(exponent=space_dim / (2.0 * order), scale=order / space_dim, w_min=w_min)

    @classmethod
    def sparse_direct(cls, order: int, space_dim: int, w_min: float = 1.0) -> "WorkModel":
        """Sparse direct solver: ``W = (r/(1.5 d)) eps**(-1.5 d/r)``."""
        return cls(
            exponent=1.5 * space_dim / (2.0 * order),
            scale=order / (1.5 * space_dim),
            w_min=w_min,
        )

    def work(self, eps) -> np.ndarray | float:
        eps = np.asarray(eps, dtype=float)
        if np.any(eps <= 0):
            raise ValueError("tolerance must be positive")
        w = np.maximum(self.scale * eps ** (-2.0 * self.exponent), self.w_min)
        return float(w) if w.ndim == 0 else w

    def work_of_information(self, v):
        """Smooth work ``scale * v**exponent`` (no floor), ``v = eps**-2``."""
        return self.scale * np.asarray(v, dtype=float) ** self.exponent

    def information_of_work(self, w):
        return (np.asarray(w, dtype=float) / self.scale) ** (1.0 / self.exponent)

    def tolerance_of_work(self, w):
        return self.information_of_work(w) ** -0.5


def work_of_tolerance(eps, model: WorkModel):
    return model.work(eps)


def design_work(design: Design, model: WorkModel) -> float:
    if design.n == 0:
        return 0.0
    return math.fsum(np.atleast_1d(model.work(design.tolerances)))


def incremental_work(refined: Design, base: Design, model: WorkModel) -> float:
    """Work to reach ``refined`` from ``base`` when simulations are continued.

    ``base`` points must be the leading rows of ``refined`` and may only get
    tighter tolerances.
    """
    n = base.n
    if refined.n < n or not np.array_equal(refined.points[:n], base.points):
        raise ValueError("refined design must extend the base design")
    if np.any(refined.tolerances[:n] > base.tolerances):
        raise RefinementOrderViolation("refinement loosens a tolerance")
    return design_work(refined, model) - design_work(base, model)


@dataclass
class BudgetController:
    """Exponential growth of the incremental budget with a stall boost."""

    increment: float = 100.0
    growth: float = 1.1
    stall_factor: float = 1.1
    stall_threshold: float = 0.02

    def __post_init__(self):
        if not self.increment > 0:
            raise ValueError("budget increment must be positive")

    def step(self, e_prev: Optional[float], e_now: float) -> float:
        self.increment *= self.growth
        if e_prev is not None and e_prev > 0:
            if (e_prev - e_now) / e_prev < self.stall_threshold:
                self.increment *= self.stall_factor
        return self.increment


def budget_step(ctrl: BudgetController, e_prev: Optional[float], e_now: float) -> float:
    return ctrl.step(e_prev, e_now)
