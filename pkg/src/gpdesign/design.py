"""One step of sequential experiment design.

Candidate points are proposed and filtered, then the available work is
distributed over existing and candidate points by minimizing the frozen
global error ``E~(v)`` (``v = eps**-2``) subject to the work budget.

The allocation is solved in work-increment coordinates
``u_i = W(v_i) - W(v_lower_i) >= 0`` with ``sum(u) = budget - W(v_lower)``,
so the budget constraint is always exactly active and the bounds are plain
non-negativity.  For ``s >= 1`` the map ``u -> v`` is concave and ``E~`` is
convex and decreasing, so the problem stays convex in ``u``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.stats import qmc

from .error_model import AccuracyObjective, NodeTable
from .exceptions import ExhaustedCandidates, InfeasibleBudget
from .gp import Design, SurrogateModel
from .work import WorkModel

STRATEGIES = ("acquisition", "random", "halton")
SPARSITY = 1e-6
SIGNIFICANCE = 0.1
KKT_TOL = 1e-8


@dataclass
class CandidateSet:
    points: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        self.points = pts if pts.ndim == 2 else np.atleast_2d(pts)
        if len(self.provenance) != self.points.shape[0]:
            raise ValueError("one provenance tag per candidate")

    @classmethod
    def empty(cls, dim: int) -> "CandidateSet":
        return cls(np.empty((0, dim)), [])

    @property
    def k(self) -> int:
        return len(self.provenance)

    def __len__(self) -> int:
        return self.k

    def subset(self, mask) -> "CandidateSet":
        idx = np.flatnonzero(mask)
        return CandidateSet(self.points[idx].reshape(idx.size, -1), [self.provenance[i] for i in idx])


class HaltonStream:
    """Unscrambled Halton points, skipping the origin; ``position`` counts the
    points already handed out so a stream can be resumed."""

    def __init__(self, dim: int, position: int = 0):
        self.dim = dim
        self.position = int(position)

    def take(self, n: int) -> np.ndarray:
        engine = qmc.Halton(self.dim, scramble=False)
        engine.fast_forward(1 + self.position)
        self.position += n
        return engine.random(n)


class _Admission:
    def __init__(self, design: Design):
        self.design = design
        self.delta = design.min_separation
        self.accepted: list[np.ndarray] = []

    def admit(self, p) -> bool:
        if self.design.n and self.design.distance_to(p) < self.delta:
            return False
        if any(np.linalg.norm(p - c) < self.delta for c in self.accepted):
            return False
        self.accepted.append(np.asarray(p, dtype=float))
        return True


def generate_candidates(
    model: SurrogateModel,
    table: NodeTable,
    strategy: str = "acquisition",
    k: int = 1,
    rng: Optional[np.random.Generator] = None,
    halton: Optional[HaltonStream] = None,
) -> CandidateSet:
    """Propose up to ``k`` new points at least ``1e-4 * diagonal`` away from
    the design and from each other.

    ``acquisition`` takes the best nodes of ``table`` (ties go to the lowest
    node index), ``random`` draws uniformly, ``halton`` continues ``halton``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    design = model.data.design
    gate = _Admission(design)
    lo, hi = design.lower, design.upper
    found: list[np.ndarray] = []
    if strategy == "acquisition":
        order = np.argsort(-table.acquisition, kind="stable")
        for i in order:
            if gate.admit(table.nodes[i]):
                found.append(table.nodes[i])
                if len(found) == k:
                    break
    elif strategy in ("random", "halton"):
        if strategy == "random" and rng is None:
            raise ValueError("random strategy needs an rng")
        if strategy == "halton" and halton is None:
            halton = HaltonStream(design.dim)
        for _ in range(100 * k):
            u = rng.random(design.dim) if strategy == "random" else halton.take(1)[0]
            p = lo + u * (hi - lo)
            if gate.admit(p):
                found.append(p)
                if len(found) == k:
                    break
    else:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if not found:
        raise ExhaustedCandidates(f"no admissible {strategy} candidate")
    return CandidateSet(np.array(found), [strategy] * len(found))


@dataclass
class AccuracyProblem:
    """Minimize ``objective`` over ``v >= lower`` with ``W(v) <= budget``.

    The first ``n_existing`` entries are design points (lower bound = their
    current information), the rest are candidates (lower bound 0).  ``W`` is
    the smooth work ``scale * sum(v**s)`` of ``work_model``.
    """

    objective: AccuracyObjective
    lower: np.ndarray
    n_existing: int
    budget: float
    work_model: WorkModel

    @property
    def size(self) -> int:
        return self.lower.size

    def work(self, v) -> float:
        return math.fsum(self.work_model.work_of_information(v))

    @property
    def base_work(self) -> float:
        return self.work(self.lower)


def build_problem(model: SurrogateModel, table: NodeTable, candidates: CandidateSet,
                  delta_w: float, work_model: WorkModel, epsilon_mode: str = "trace") -> AccuracyProblem:
    design = model.data.design
    points = design.points if candidates.k == 0 else np.vstack([design.points, candidates.points])
    obj = AccuracyObjective(model.hyper, points, table, model.n_outputs, epsilon_mode)
    lower = np.concatenate([design.tolerances**-2.0, np.zeros(candidates.k)])
    budget = math.fsum(work_model.work_of_information(lower[: design.n])) + delta_w
    return AccuracyProblem(obj, lower, design.n, budget, work_model)


def filter_candidates(candidates: CandidateSet, model: SurrogateModel, table: NodeTable,
                      tol: Optional[float] = None, epsilon_mode: str = "trace") -> CandidateSet:
    """Drop candidates whose information derivative ``|dE~/dv_i|`` at the
    current design is below ``tol`` (default ``1e-12 * E~``)."""
    if candidates.k == 0:
        return candidates
    prob = build_problem(model, table, candidates, 0.0, WorkModel(), epsilon_mode)
    if tol is None:
        tol = 1e-12 * abs(prob.objective.value(prob.lower))
    grad = prob.objective.gradient(prob.lower)[prob.n_existing:]
    return candidates.subset(np.abs(grad) >= tol)


@dataclass
class AllocationResult:
    v: np.ndarray
    value: float
    kkt_residual: float
    iterations: int
    converged: bool
    heuristic_pick: Optional[int] = None


class _Reparam:
    """``v(u) = ((a + u) / scale)**(1/s)`` with ``a = scale * v_lower**s``."""

    def __init__(self, prob: AccuracyProblem):
        wm = prob.work_model
        self.s, self.scale = wm.exponent, wm.scale
        self.lower = prob.lower
        self.a = self.scale * prob.lower**self.s
        self.total = prob.budget - math.fsum(self.a)

    def v(self, u):
        t = (self.a + u) / self.scale
        return np.maximum(t ** (1.0 / self.s), self.lower)

    def dv(self, u, idx):
        t = (self.a[idx] + u[idx]) / self.scale
        r = 1.0 / self.s
        with np.errstate(divide="ignore", invalid="ignore"):
            return r / self.scale * t ** (r - 1.0), r * (r - 1.0) / self.scale**2 * t ** (r - 2.0)


def _projected_descent(g, total):
    """Steepest descent within ``sum(d) = 0``, scaled to the budget."""
    d = -(g - g.mean())
    return d * (total / max(np.max(np.abs(d)), np.finfo(float).tiny))


def _newton_direction(H, g):
    """Newton step within ``sum(d) = 0``; ``H`` is shifted to be positive
    definite.  Returns None if the step is not a descent direction."""
    ev = np.linalg.eigvalsh(H)
    shift = max(0.0, -ev[0]) + 1e-10 * max(np.max(np.abs(ev)), np.finfo(float).tiny)
    n = g.size
    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = H + shift * np.eye(n)
    K[:n, n] = K[n, :n] = 1.0
    # an inaccurate step on a nearly singular system is caught by the descent
    # test here and the line search of the caller
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        try:
            d = linalg.solve(K, np.concatenate([-g, [0.0]]))[:n]
        except linalg.LinAlgError:
            return None
    d -= d.mean()
    return d if g @ d < 0 else None


def _solve_active_set(prob: AccuracyProblem, u0, free0, max_iter: int = 500, tol: float = KKT_TOL):
    """Active-set Newton on ``min f(u)`` s.t. ``sum(u) = T``, ``u >= 0``."""
    rp = _Reparam(prob)
    obj = prob.objective
    T = rp.total
    # with s > 1 the derivative dv/du is infinite at u = 0 for candidates, so
    # such variables are kept strictly positive and never become active
    interior = (rp.a == 0) & (rp.s > 1)
    u = np.asarray(u0, dtype=float).copy()
    free = np.asarray(free0, dtype=bool) | interior
    f = obj.value(rp.v(u))
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        v = rp.v(u)
        gv = obj.gradient(v)
        F = np.flatnonzero(free)
        d1F, d2F = rp.dv(u, F)
        g = np.zeros_like(u)
        g[F] = gv[F] * d1F
        B = np.flatnonzero(~free)
        if B.size:
            g[B] = gv[B] * rp.dv(u, B)[0]
        mu = -g[F].mean()
        stat = np.max(np.abs(g[F] + mu))
        lam = g[B] + mu
        dual = max(0.0, -lam.min()) if B.size else 0.0
        gscale = max(np.max(np.abs(g)), np.finfo(float).tiny)
        res = max(stat, dual) / gscale
        if res <= tol:
            break

        d = np.zeros_like(u)
        if dual > stat:
            # release the most violating bound and move along the projected gradient
            free[B[np.argmin(lam)]] = True
            F = np.flatnonzero(free)
            d[F] = _projected_descent(g[F], T)
        elif F.size > 1:
            Hv = obj.hessian(v)[np.ix_(F, F)]
            with np.errstate(invalid="ignore"):
                H = d1F[:, None] * Hv * d1F[None, :] + np.diag(gv[F] * d2F)
            step = _newton_direction(H, g[F]) if np.all(np.isfinite(H)) else None
            d[F] = step if step is not None else _projected_descent(g[F], T)
        else:
            break

        neg = (d < 0) & free
        step_max = np.inf
        hit = -1
        if np.any(neg):
            idx = np.flatnonzero(neg)
            ratio = u[idx] / -d[idx]
            ratio[interior[idx]] *= 0.99
            j = np.argmin(ratio)
            step_max, hit = ratio[j], idx[j]
        alpha = min(1.0, step_max)
        slope = g @ d
        accepted = False
        for _ in range(60):
            trial = np.maximum(u + alpha * d, 0.0)
            ft = obj.value(rp.v(trial))
            if ft <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        if alpha == step_max and hit >= 0 and not interior[hit]:
            trial[hit] = 0.0
            free[hit] = False
        F = np.flatnonzero(free)
        trial[F] += (T - trial.sum()) / F.size
        u = np.maximum(trial, 0.0)
        f = obj.value(rp.v(u))
    return u, res, it


def allocate_accuracy(prob: AccuracyProblem, start: str = "uniform", seed: int = 0,
                      max_iter: int = 500) -> AllocationResult:
    """Optimal information weights ``v*`` for the budget of ``prob``.

    ``s >= 1`` is solved as a convex program from ``start`` (``uniform`` or
    ``random`` spread of the work).  For ``s < 1`` every point is first tried
    alone with the whole budget; the best one seeds a local descent.
    """
    rp = _Reparam(prob)
    T = rp.total
    if not T > 0:
        raise InfeasibleBudget(f"budget {prob.budget} does not exceed the committed work")
    n = prob.size
    pick = None
    if rp.s >= 1:
        if start == "uniform":
            u0 = np.full(n, T / n)
        elif start == "random":
            u0 = T * np.random.default_rng(seed).dirichlet(np.ones(n))
        else:
            raise ValueError("start must be 'uniform' or 'random'")
        free0 = np.ones(n, dtype=bool)
    else:
        values = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = T
            values[i] = prob.objective.value(rp.v(e))
        pick = int(np.argmin(values))
        u0 = np.zeros(n)
        u0[pick] = T
        free0 = u0 > 0
    u, res, it = _solve_active_set(prob, u0, free0, max_iter)
    v = rp.v(u)
    return AllocationResult(v, prob.objective.value(v), float(res), it, bool(res <= KKT_TOL), pick)


@dataclass(frozen=True)
class EvaluationOrder:
    """``kind`` is ``"new"`` (evaluate at ``eps``) or ``"refine"`` (continue
    from ``eps_old`` to ``eps``); ``index`` is the row in the new design."""

    kind: str
    index: int
    point: tuple
    eps: float
    eps_old: Optional[float] = None


def apply_allocation(design: Design, candidates: CandidateSet, v,
                     sparsity: float = SPARSITY, significance: float = SIGNIFICANCE):
    """Turn ``v*`` into a refined design and the orders that realize it.

    Candidates with ``v_i <= sparsity * max(v)`` are not evaluated; existing
    points whose tolerance would shrink by less than ``significance``
    (relative) keep their old tolerance.
    """
    v = np.asarray(v, dtype=float)
    n = design.n
    vmax = v.max() if v.size else 0.0
    orders = []
    tols = design.tolerances.copy()
    for i in range(n):
        if v[i] <= 0:
            continue
        eps_new = v[i] ** -0.5
        if (tols[i] - eps_new) / tols[i] >= significance:
            orders.append(EvaluationOrder("refine", i, tuple(design.points[i]), float(eps_new), float(tols[i])))
            tols[i] = eps_new
    keep = np.flatnonzero(v[n:] > sparsity * vmax)
    new_tols = v[n:][keep] ** -0.5
    for j, (c, eps) in enumerate(zip(candidates.points[keep], new_tols)):
        orders.append(EvaluationOrder("new", n + j, tuple(c), float(eps)))
    refined = design.with_tolerances(tols)
    if keep.size:
        refined = refined.extended(candidates.points[keep], new_tols)
    return refined, orders
