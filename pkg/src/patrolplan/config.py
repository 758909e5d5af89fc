"""Versioned run configuration.

A configuration file is YAML (or JSON, which YAML also reads) with these
top-level sections, all optional except ``schema_version``::

    schema_version: 1
    experiment: {horizon, n_targets, budget, interval, deterrence, wildlife,
                 layout, alpha, psi, eta, discrete_points, trials, seed, kappa,
                 audit_points, methods}
    mirror:     {epsilon, n_perturb, perturb_scale, max_epochs, eval_episodes}
    agent:      {episodes, buffer_size, batch_size, noise_start, noise_end, tau,
                 actor_lr, critic_lr, hidden, updates_per_step, eval_every,
                 eval_episodes}
    nature:     {episodes, updates_per_step, theta_lr, theta_batch, relaxation,
                 theta_explore, n_starts}
    output:     {report_runtime}
    grid:       {mode: sweep | product, axes: {experiment field: [values]}}

Unknown keys anywhere are errors.  ``deterrence`` is the strength ``k`` of
``beta = -k``.
"""

from __future__ import annotations

import itertools
import math
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .agent_oracle import TrainConfig
from .baselines_eval import METHODS, ExperimentConfig
from .mirror_loop import MirrorConfig
from .nature_oracle import NatureConfig, WakeSleepSchedule

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ExperimentSection(_Strict):
    horizon: int = Field(5, ge=1)
    n_targets: int = Field(25, ge=1)
    budget: float = Field(5.0, ge=0)
    interval: float = Field(3.0, ge=0)
    deterrence: float = Field(5.0, gt=0)
    wildlife: Literal["random", "peaked", "flatter"] = "random"
    layout: Literal["square", "strip"] = "square"
    alpha: float = Field(1.0, gt=0)
    psi: float = Field(1.05, gt=1)
    eta: float = Field(0.696, gt=0)
    discrete_points: int = Field(0, ge=0)
    trials: int = Field(5, ge=1)
    seed: int = Field(0, ge=0)
    kappa: int = Field(10, ge=1)
    audit_points: int = Field(20, ge=0)
    methods: list[str] = Field(default_factory=lambda: list(METHODS))

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: list[str]) -> list[str]:
        bad = [m for m in v if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if "mirror" not in v:
            raise ValueError("'mirror' must be listed (it builds the shared strategy sets)")
        return v

    @model_validator(mode="after")
    def _model_invariants(self):
        if self.layout == "square" and math.isqrt(self.n_targets) ** 2 != self.n_targets:
            raise ValueError(f"n_targets must be a perfect square for the square layout, got {self.n_targets}")
        if self.budget > self.n_targets:
            raise ValueError(f"budget ({self.budget}) must not exceed n_targets ({self.n_targets})")
        if self.wildlife != "random" and self.layout != "square":
            raise ValueError("kernel wildlife initializations need the square layout")
        return self


class MirrorSection(_Strict):
    epsilon: float = Field(0.5, ge=0)
    n_perturb: int = Field(3, ge=0)
    perturb_scale: float = Field(0.1, ge=0)
    max_epochs: int = Field(10, ge=1)
    eval_episodes: int = Field(100, ge=2)


class AgentSection(_Strict):
    episodes: int = Field(2000, ge=1)
    buffer_size: int = Field(50_000, ge=1)
    batch_size: int = Field(64, ge=1)
    noise_start: float = Field(0.1, gt=0)
    noise_end: float = Field(0.01, gt=0)
    tau: float = Field(0.005, gt=0, le=1)
    actor_lr: float = Field(1e-4, gt=0)
    critic_lr: float = Field(1e-3, gt=0)
    hidden: list[int] = Field(default_factory=lambda: [16, 32])
    updates_per_step: int = Field(1, ge=1)
    eval_every: int = Field(100, ge=1)
    eval_episodes: int = Field(32, ge=1)


class NatureSection(_Strict):
    episodes: int | None = Field(None, ge=1)
    updates_per_step: int = Field(2, ge=1)
    theta_lr: float = Field(0.05, gt=0)
    theta_batch: int = Field(32, ge=1)
    relaxation: Literal["straight_through", "expected"] = "straight_through"
    theta_explore: float = Field(0.5, ge=0, le=1)
    n_starts: int = Field(4, ge=1)


class OutputSection(_Strict):
    report_runtime: bool = False


class GridSection(_Strict):
    mode: Literal["sweep", "product"] = "sweep"
    axes: dict[str, list[Any]] = Field(default_factory=dict)

    @field_validator("axes")
    @classmethod
    def _known_axes(cls, v: dict[str, list[Any]]) -> dict[str, list[Any]]:
        allowed = set(ExperimentSection.model_fields) - {"trials", "seed", "methods"}
        bad = sorted(set(v) - allowed)
        if bad:
            raise ValueError(f"unknown grid axes {bad}")
        for name, values in v.items():
            if not values:
                raise ValueError(f"grid axis {name!r} has no values")
        return v


class RunConfig(_Strict):
    schema_version: int
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    mirror: MirrorSection = Field(default_factory=MirrorSection)
    agent: AgentSection = Field(default_factory=AgentSection)
    nature: NatureSection = Field(default_factory=NatureSection)
    output: OutputSection = Field(default_factory=OutputSection)
    grid: GridSection | None = None

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v} (expected {SCHEMA_VERSION})")
        return v

    def to_experiment(self) -> ExperimentConfig:
        a, n, m, e = self.agent, self.nature, self.mirror, self.experiment
        agent = TrainConfig(**{**a.model_dump(), "hidden": tuple(a.hidden)})
        nature_train = TrainConfig(**{**a.model_dump(), "hidden": tuple(a.hidden),
                                      "episodes": n.episodes or a.episodes, "updates_per_step": n.updates_per_step})
        nature = NatureConfig(train=nature_train, theta_lr=n.theta_lr, theta_batch=n.theta_batch,
                              relaxation=n.relaxation, theta_explore=n.theta_explore, n_starts=n.n_starts)
        mirror = MirrorConfig(epsilon=m.epsilon, n_perturb=m.n_perturb, perturb_scale=m.perturb_scale,
                              max_epochs=m.max_epochs, eval_episodes=m.eval_episodes, agent=agent, nature=nature,
                              schedule=WakeSleepSchedule(e.kappa, nature_train.episodes))
        fields = e.model_dump()
        fields["methods"] = tuple(fields["methods"])
        return ExperimentConfig(**fields, mirror=mirror)

    def with_overrides(self, seed: int | None = None, eval_episodes: int | None = None) -> "RunConfig":
        data = self.model_dump()
        if seed is not None:
            data["experiment"]["seed"] = seed
        if eval_episodes is not None:
            data["mirror"]["eval_episodes"] = eval_episodes
        return validate_config(data)

    def grid_cells(self) -> list["RunConfig"]:
        """One config per grid cell (the base config itself when there is no grid)."""
        if self.grid is None or not self.grid.axes:
            return [self]
        base = self.model_dump()
        base["grid"] = None
        combos: list[dict[str, Any]] = []
        axes = self.grid.axes
        if self.grid.mode == "product":
            names = list(axes)
            combos = [dict(zip(names, vals)) for vals in itertools.product(*(axes[k] for k in names))]
        else:
            combos = [{}]
            for name, values in axes.items():
                for v in values:
                    if v != base["experiment"][name]:
                        combos.append({name: v})
        cells = []
        seen = set()
        for combo in combos:
            data = {**base, "experiment": {**base["experiment"], **combo}}
            cfg = validate_config(data)
            label = cfg.to_experiment().setting
            if label not in seen:
                seen.add(label)
                cells.append(cfg)
        return cells


def validate_config(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    if "schema_version" not in data:
        raise ConfigError("schema_version: field required")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        parts = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            parts.append(f"{loc}: {err['msg']}")
        raise ConfigError("; ".join(parts)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
    return validate_config(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=True)
