"""Run configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .error_model import ErrorModelConfig
from .exceptions import ConfigError
from .models import ForwardModel, ParabolicCylinderModel, QuantizedLevelModel
from .work import BudgetController, WorkModel


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    kind: Literal["parabolic_cylinder", "quantized"] = "parabolic_cylinder"
    angles: list[float] = [0.0, 2.0, 4.0]
    noise: Literal["gaussian", "exact"] = "gaussian"
    # quantized-level mock around the parabolic cylinder
    eps0: float = Field(0.1, gt=0)
    ratio: float = Field(0.5, gt=0, lt=1)
    order: int = Field(2, ge=1)
    space_dim: int = Field(2, ge=1)


class ErrorSection(_Strict):
    q: float = Field(2.0, ge=2)
    alpha: float = Field(0.0, ge=0)
    beta: float = Field(0.0, ge=0)
    c2: Optional[float] = None
    regularization: Optional[float] = None
    epsilon_mode: Literal["trace", "chi-median"] = "trace"
    integration: Literal["grid", "mc"] = "grid"
    grid_points: int = Field(25, ge=1)
    mc_points: int = Field(10000, ge=1)


class WorkSection(_Strict):
    exponent: float = Field(0.5, gt=0)
    scale: float = Field(1.0, gt=0)
    w_min: float = Field(1.0, ge=0)


class BudgetSection(_Strict):
    initial: float = Field(100.0, gt=0)
    growth: float = Field(1.1, gt=0)
    stall_factor: float = Field(1.1, gt=0)
    stall_threshold: float = 0.02


class CandidateSection(_Strict):
    strategy: Literal["acquisition", "random", "halton"] = "acquisition"
    k: int = Field(1, ge=1)
    filter_tol: Optional[float] = Field(None, ge=0)


class InitialDesignSection(_Strict):
    """``boundary``: box corners and edge midpoints; ``points``: explicit list."""

    kind: Literal["boundary", "points"] = "boundary"
    tolerance: float = Field(0.1, gt=0)
    points: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _points_given(self):
        if self.kind == "points" and not self.points:
            raise ValueError("initial_design.kind='points' needs a points list")
        return self


class ReconstructionSection(_Strict):
    p_true: Optional[list[float]] = [0.5, 0.5]
    measurement: Optional[list[float]] = None
    n_start: int = Field(5, ge=1)
    start_grid: int = Field(9, ge=1)


class ReliabilitySection(_Strict):
    n_points: int = Field(1600, ge=1)
    draws: int = Field(10, ge=1)


class RunConfig(_Strict):
    model: ModelSection = ModelSection()
    error: ErrorSection = ErrorSection()
    work: WorkSection = WorkSection()
    budget: BudgetSection = BudgetSection()
    candidates: CandidateSection = CandidateSection()
    initial_design: InitialDesignSection = InitialDesignSection()
    likelihood_cov: list[list[float]] = [[1e-2, 0, 0], [0, 1e-3, 0], [0, 0, 1e-2]]
    prior_cov: Optional[list[list[float]]] = None
    prior_mean: Optional[list[float]] = None
    tol: float = Field(1e-2, gt=0)
    max_iterations: int = Field(500, ge=0)
    max_work: float = Field(1e7, gt=0)
    baseline_eps: float = Field(1e-4, gt=0)
    freeze_hyperparameters: bool = False
    hyper_restarts: int = Field(5, ge=1)
    reconstruction: ReconstructionSection = ReconstructionSection()
    reliability: ReliabilitySection = ReliabilitySection()
    seed: int = 0
    out: str = "runs/default"

    @field_validator("likelihood_cov")
    @classmethod
    def _spd(cls, v):
        a = np.asarray(v, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("likelihood_cov must be a square matrix")
        if not np.allclose(a, a.T) or np.linalg.eigvalsh(a)[0] <= 0:
            raise ValueError("likelihood_cov must be symmetric positive definite")
        return v

    # builders -------------------------------------------------------------

    def forward_model(self) -> ForwardModel:
        wm = WorkModel(self.work.exponent, self.work.scale, self.work.w_min)
        base = ParabolicCylinderModel(self.model.angles, self.model.noise, self.seed, wm)
        if self.model.kind == "parabolic_cylinder":
            return base
        return QuantizedLevelModel(base, self.model.eps0, self.model.ratio, self.model.order,
                                   self.model.space_dim, seed=self.seed)

    def error_model(self) -> ErrorModelConfig:
        e = self.error
        return ErrorModelConfig(e.q, e.alpha, e.beta, e.c2, e.regularization, e.epsilon_mode,
                                e.integration, e.grid_points, e.mc_points, self.seed)

    def budget_controller(self) -> BudgetController:
        b = self.budget
        return BudgetController(b.initial, b.growth, b.stall_factor, b.stall_threshold)

    def sigma_l(self) -> np.ndarray:
        return np.asarray(self.likelihood_cov, dtype=float)

    def with_overrides(self, **changes) -> "RunConfig":
        data = self.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.model_validate(data)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
        return RunConfig.model_validate(json.loads(text))
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
