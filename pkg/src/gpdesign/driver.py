"""Adaptive design loop, fixed-tolerance baseline, reliability study and
reconstruction, plus the run-directory artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig
from .design import (
    CandidateSet,
    HaltonStream,
    allocate_accuracy,
    apply_allocation,
    build_problem,
    filter_candidates,
    generate_candidates,
)
from .error_model import epsilon_from_std, global_error, transport_factor
from .exceptions import ExhaustedCandidates, GPDesignError, InfeasibleBudget
from .gp import (
    Design,
    HyperparameterBounds,
    Hyperparameters,
    SurrogateModel,
    TrainingData,
    fit,
    optimize_hyperparameters,
)
from .inverse import InverseProblem, ReconstructionResult, laplace_covariance, multistart_batch, multistart_solve
from .models import ForwardModel
from .work import design_work

log = logging.getLogger(__name__)


@dataclass
class IterationRecord:
    iteration: int
    n_points: int
    cum_work: float
    delta_w: float
    global_error: float
    hyperparameters: Hyperparameters
    budget: float = 0.0
    carry: float = 0.0


@dataclass
class RunArtifacts:
    config: RunConfig
    records: list[IterationRecord]
    data: TrainingData
    model: SurrogateModel
    converged: bool
    stop_reason: str
    charges: list[float] = field(default_factory=list)
    reconstruction: Optional[ReconstructionResult] = None
    reliability: Optional["ReliabilityTable"] = None

    @property
    def design(self) -> Design:
        return self.data.design

    @property
    def total_work(self) -> float:
        return math.fsum(self.charges)

    @property
    def final_error(self) -> float:
        return self.records[-1].global_error


def boundary_design(lower, upper, tolerance: float) -> Design:
    """Corners and edge midpoints of a 2-d box."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.size != 2:
        raise ValueError("boundary design is defined for two parameters")
    t = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0], [0, 0.5], [1, 0.5], [0.5, 1]])
    pts = lower + t * (upper - lower)
    return Design(pts, np.full(len(pts), tolerance), lower, upper)


def initial_design(cfg: RunConfig, forward: ForwardModel) -> Design:
    init = cfg.initial_design
    if init.kind == "boundary":
        return boundary_design(forward.lower, forward.upper, init.tolerance)
    pts = np.asarray(init.points, dtype=float)
    return Design(pts, np.full(len(pts), init.tolerance), forward.lower, forward.upper)


class _Evaluator:
    """Executes evaluation orders and keeps the work ledger."""

    def __init__(self, forward: ForwardModel):
        self.forward = forward
        self.charges: list[float] = []

    def new(self, p, eps):
        ev = self.forward.evaluate_to_tolerance(np.asarray(p), eps)
        self.charges.append(ev.work_charged)
        return ev

    def refine(self, p, eps_old, eps_new):
        ev = self.forward.refine(np.asarray(p), eps_old, eps_new)
        self.charges.append(ev.work_charged)
        return ev

    @property
    def total(self) -> float:
        return math.fsum(self.charges)


def _evaluate_design(ev: _Evaluator, design: Design) -> TrainingData:
    vals, tols = [], []
    for p, eps in zip(design.points, design.tolerances):
        e = ev.new(p, eps)
        vals.append(e.value)
        tols.append(e.eps_achieved)
    return TrainingData(design.with_tolerances(tols), np.array(vals))


class _Surrogate:
    """Hyperparameter refits with warm start (optionally frozen after the first)."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.hyper: Optional[Hyperparameters] = None

    def fit(self, data: TrainingData) -> SurrogateModel:
        if self.hyper is None or not self.cfg.freeze_hyperparameters:
            res = optimize_hyperparameters(
                data, HyperparameterBounds.default(data), self.hyper,
                restarts=self.cfg.hyper_restarts, seed=self.cfg.seed,
            )
            self.hyper = res.hyperparameters
        return fit(data, self.hyper)


def adaptive_run(cfg: RunConfig, forward: Optional[ForwardModel] = None) -> RunArtifacts:
    """Alternate surrogate fits with budgeted accuracy allocations until the
    global error reaches ``cfg.tol`` or a cap is hit."""
    forward = forward or cfg.forward_model()
    ecfg = cfg.error_model()
    sigma_l = cfg.sigma_l()
    ctrl = cfg.budget_controller()
    rng = np.random.default_rng(cfg.seed)
    halton = HaltonStream(forward.dim)
    ev = _Evaluator(forward)
    data = _evaluate_design(ev, initial_design(cfg, forward))
    surrogate = _Surrogate(cfg)

    records: list[IterationRecord] = []
    carry = 0.0
    spent = ev.total
    e_prev = None
    converged, reason = False, "iteration cap"
    for it in range(cfg.max_iterations + 1):
        model = surrogate.fit(data)
        E, table = global_error(model, sigma_l, ecfg)
        if it > 0:
            ctrl.step(e_prev, E)
        records.append(IterationRecord(it, data.design.n, ev.total, ev.total - spent, E,
                                       surrogate.hyper, ctrl.increment, carry))
        log.info("iteration %d: n=%d W=%.6g E=%.6g", it, data.design.n, ev.total, E)
        spent = ev.total
        e_prev = E
        if E <= cfg.tol:
            converged, reason = True, "tolerance reached"
            break
        if ev.total >= cfg.max_work:
            reason = "work cap"
            break
        if it == cfg.max_iterations:
            break

        # carry > 0 is work spent beyond earlier allocations, carry < 0 is
        # allocated work that was not spent
        effective = ctrl.increment - carry
        if effective <= 0:
            carry -= ctrl.increment
            continue
        effective = min(effective, cfg.max_work - ev.total)
        try:
            cands = generate_candidates(model, table, cfg.candidates.strategy, cfg.candidates.k,
                                        rng=rng, halton=halton)
            cands = filter_candidates(cands, model, table, cfg.candidates.filter_tol, ecfg.epsilon_mode)
        except ExhaustedCandidates:
            cands = CandidateSet.empty(forward.dim)
        problem = build_problem(model, table, cands, effective, forward.work_model, ecfg.epsilon_mode)
        try:
            alloc = allocate_accuracy(problem)
        except InfeasibleBudget:
            continue
        _, orders = apply_allocation(data.design, cands, alloc.v)
        before = ev.total
        data = _execute(ev, data, orders)
        carry = (ev.total - before) - effective
    return RunArtifacts(cfg, records, data, fit(data, surrogate.hyper), converged, reason, ev.charges)


def _execute(ev: _Evaluator, data: TrainingData, orders) -> TrainingData:
    design = data.design
    tols = design.tolerances.copy()
    values = data.values.copy()
    new_pts, new_tols, new_vals = [], [], []
    for order in orders:
        if order.kind == "refine":
            e = ev.refine(order.point, tols[order.index], order.eps)
            tols[order.index] = e.eps_achieved
            values[order.index] = e.value
        else:
            e = ev.new(order.point, order.eps)
            new_pts.append(order.point)
            new_tols.append(e.eps_achieved)
            new_vals.append(e.value)
    refined = design.with_tolerances(tols)
    if new_pts:
        refined = refined.extended(np.array(new_pts), new_tols)
        values = np.vstack([values, np.array(new_vals)])
    return TrainingData(refined, values)


def position_adaptive_run(cfg: RunConfig, eps: Optional[float] = None,
                          forward: Optional[ForwardModel] = None) -> RunArtifacts:
    """Baseline: add the acquisition maximizer at a fixed tolerance per step."""
    eps = cfg.baseline_eps if eps is None else eps
    forward = forward or cfg.forward_model()
    ecfg = cfg.error_model()
    sigma_l = cfg.sigma_l()
    ev = _Evaluator(forward)
    data = _evaluate_design(ev, initial_design(cfg, forward))
    surrogate = _Surrogate(cfg)
    records: list[IterationRecord] = []
    spent = ev.total
    converged, reason = False, "iteration cap"
    for it in range(cfg.max_iterations + 1):
        model = surrogate.fit(data)
        E, table = global_error(model, sigma_l, ecfg)
        records.append(IterationRecord(it, data.design.n, ev.total, ev.total - spent, E, surrogate.hyper))
        log.info("baseline iteration %d: n=%d W=%.6g E=%.6g", it, data.design.n, ev.total, E)
        spent = ev.total
        if E <= cfg.tol:
            converged, reason = True, "tolerance reached"
            break
        if ev.total >= cfg.max_work:
            reason = "work cap"
            break
        if it == cfg.max_iterations:
            break
        try:
            cand = generate_candidates(model, table, "acquisition", 1)
        except ExhaustedCandidates:
            reason = "no admissible candidate"
            break
        e = ev.new(cand.points[0], eps)
        data = TrainingData(data.design.extended(cand.points, [e.eps_achieved]),
                            np.vstack([data.values, e.value]))
    return RunArtifacts(cfg, records, data, fit(data, surrogate.hyper), converged, reason, ev.charges)


# inverse problems ------------------------------------------------------------


def inverse_problem(cfg: RunConfig, forward: ForwardModel, measurement) -> InverseProblem:
    prior = None if cfg.prior_cov is None else np.asarray(cfg.prior_cov)
    mean = None if cfg.prior_mean is None else np.asarray(cfg.prior_mean)
    return InverseProblem(measurement, cfg.sigma_l(), forward.lower, forward.upper, prior, mean)


def reconstruct(cfg: RunConfig, model: SurrogateModel, p_true=None, measurement=None,
                forward: Optional[ForwardModel] = None) -> ReconstructionResult:
    """MAP estimate on the surrogate with Laplace standard deviations.

    With ``p_true`` the measurement is the exact model output there.
    """
    forward = forward or cfg.forward_model()
    if measurement is None:
        if p_true is None:
            p_true = cfg.reconstruction.p_true
        if p_true is None:
            raise ValueError("need a measurement or a true parameter")
        measurement = forward.value(np.asarray(p_true, dtype=float))
    prob = inverse_problem(cfg, forward, measurement)
    rc = cfg.reconstruction
    res = multistart_solve(prob, model, rc.n_start, rc.start_grid)
    res.stds = laplace_covariance(prob, model, res.p_map)
    return res


@dataclass
class ReliabilityTable:
    points: np.ndarray
    e_est: np.ndarray
    e_mean: np.ndarray
    ratio: np.ndarray
    flag: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]


def reliability_study(cfg: RunConfig, model: SurrogateModel, n_points: Optional[int] = None,
                      draws: Optional[int] = None, forward: Optional[ForwardModel] = None,
                      noise: bool = True) -> ReliabilityTable:
    """Compare the estimated parameter error ``w~ * eps`` with the mean
    distance between exact-model and surrogate MAP estimates under noisy
    synthetic measurements.  Rows whose solves fail are flagged."""
    forward = forward or cfg.forward_model()
    n_points = cfg.reliability.n_points if n_points is None else n_points
    draws = cfg.reliability.draws if draws is None else draws
    rng = np.random.default_rng([cfg.seed, 7])
    lo, hi = forward.lower, forward.upper
    P = lo + rng.random((n_points, forward.dim)) * (hi - lo)
    sigma_l = cfg.sigma_l()
    ecfg = cfg.error_model()

    w = transport_factor(model.predict_gradient(P), sigma_l, ecfg.regularization)
    std = np.sqrt(model.variance(P))[:, None] * np.ones(model.n_outputs)
    e_est = w * epsilon_from_std(std, ecfg.epsilon_mode, ecfg.q)

    chol = np.linalg.cholesky(sigma_l)
    delta = rng.standard_normal((n_points, draws, sigma_l.shape[0])) @ chol.T
    if not noise:
        delta[:] = 0.0
    Y = (forward.value(P)[:, None, :] + delta).reshape(n_points * draws, -1)
    prob = inverse_problem(cfg, forward, Y[0])
    rc = cfg.reconstruction
    exact = multistart_batch(prob, _ExactMap(forward), Y, rc.n_start, rc.start_grid)
    surr = multistart_batch(prob, model, Y, rc.n_start, rc.start_grid)
    err = np.linalg.norm(exact.p - surr.p, axis=1).reshape(n_points, draws)
    failed = (exact.singular | surr.singular | ~exact.converged | ~surr.converged).reshape(n_points, draws)
    e_mean = err.mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = e_est / e_mean
    flag = failed.any(axis=1) | ~np.isfinite(ratio) | ~(ratio > 0)
    return ReliabilityTable(P, e_est, e_mean, ratio, flag)


class _ExactMap:
    """Exact forward map with the evaluable interface of the surrogate."""

    def __init__(self, forward: ForwardModel):
        self.forward = forward

    def value(self, p):
        return self.forward.value(np.asarray(p, dtype=float))

    def jacobian(self, p):
        return self.forward.jacobian(np.asarray(p, dtype=float))


# artifacts -----------------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def convergence_csv(art: RunArtifacts) -> str:
    rows = [[r.iteration, r.n_points, _fmt(r.cum_work), _fmt(r.delta_w), _fmt(r.global_error)]
            for r in art.records]
    return _csv_text(["iter", "n_points", "cum_work", "delta_w", "global_error"], rows)


def design_csv(data: TrainingData) -> str:
    d, m = data.design.dim, data.n_outputs
    header = [f"p{i + 1}" for i in range(d)] + ["tolerance"] + [f"y{j + 1}" for j in range(m)]
    rows = [[_fmt(x) for x in p] + [_fmt(t)] + [_fmt(y) for y in v]
            for p, t, v in zip(data.design.points, data.design.tolerances, data.values)]
    return _csv_text(header, rows)


def reliability_csv(table: ReliabilityTable) -> str:
    d = table.points.shape[1]
    header = [f"p{i + 1}" for i in range(d)] + ["e_est", "e_mean", "ratio", "flag"]
    rows = [[_fmt(x) for x in p] + [_fmt(a), _fmt(b), _fmt(c), int(f)]
            for p, a, b, c, f in zip(table.points, table.e_est, table.e_mean, table.ratio, table.flag)]
    return _csv_text(header, rows)


def summary(art: RunArtifacts) -> dict:
    out = {
        "config": art.config.model_dump(),
        "converged": art.converged,
        "stop_reason": art.stop_reason,
        "iterations": len(art.records) - 1,
        "final_error": art.final_error,
        "total_work": art.total_work,
        "design_work": design_work(art.design, art.config.forward_model().work_model),
        "n_points": art.design.n,
        "hyperparameters": art.model.hyper.to_dict(),
        "reconstruction": None if art.reconstruction is None else art.reconstruction.to_dict(),
    }
    if art.reliability is not None:
        t = art.reliability
        ok = ~t.flag
        out["reliability"] = {
            "rows": len(t),
            "flagged": int(t.flag.sum()),
            "median_ratio": float(np.median(t.ratio[ok])) if ok.any() else None,
        }
    return out


def write_text(path: Path, text: str):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def write_artifacts(art: RunArtifacts, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "run.json", json.dumps(summary(art), indent=2, sort_keys=True) + "\n")
    write_text(out / "convergence.csv", convergence_csv(art))
    write_text(out / "design.csv", design_csv(art.data))
    if art.reliability is not None:
        write_text(out / "reliability.csv", reliability_csv(art.reliability))
    return out


def load_surrogate(run_dir) -> SurrogateModel:
    """Rebuild the final surrogate of a previous run from its artifacts."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run.json").read_text())
    cfg = RunConfig.model_validate(meta["config"])
    forward = cfg.forward_model()
    with open(run_dir / "design.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    arr = np.array(rows[1:], dtype=float).reshape(len(rows) - 1, -1)
    d = forward.dim
    design = Design(arr[:, :d], arr[:, d], forward.lower, forward.upper)
    h = meta["hyperparameters"]
    hyper = Hyperparameters(h["signal_variance"], np.asarray(h["lengthscales"]))
    return fit(TrainingData(design, arr[:, d + 1:]), hyper)


__all__ = [
    "IterationRecord",
    "RunArtifacts",
    "ReliabilityTable",
    "adaptive_run",
    "position_adaptive_run",
    "reliability_study",
    "reconstruct",
    "write_artifacts",
    "load_surrogate",
    "GPDesignError",
]
