"""Experiment configuration files (YAML) with strict validation.

Unknown keys anywhere in the tree are rejected, and error messages name the
offending key path.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .env import CurriculumStage, EnvConfig
from .learner import EpsilonSchedule, HierarchyConfig, ReplayConfig, TrainConfig
from .mapping import CropSpec, DeicticConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSection(_Strict):
    width: int = Field(3, ge=1)
    height: int = Field(3, ge=1)
    num_objects: int = Field(2, ge=0)
    horizon: int = Field(10, ge=1)
    adjacency: Literal["four", "horizontal"] = "four"
    block_length: int = Field(3, ge=1)
    align_max_distance: Optional[float] = None
    align_max_along: float = 1.0
    grasp_tolerance: int = Field(1, ge=0)


class DeicticSection(_Strict):
    k: int = Field(2, ge=1)
    window: int = Field(3, ge=1)
    padding_value: float = 0.0
    interpolation: Literal["nearest", "bilinear"] = "nearest"

    @field_validator("window")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("crop window must be odd")
        return v


class EpsilonSection(_Strict):
    start: float = Field(0.5, ge=0.0, le=1.0)
    end: float = Field(0.1, ge=0.0, le=1.0)
    decay_steps: int = Field(10_000, ge=0)


class ReplaySection(_Strict):
    capacity: int = Field(10_000, ge=1)
    mode: Literal["uniform", "prioritized"] = "uniform"
    alpha: float = Field(0.6, ge=0.0)
    beta: float = Field(0.4, ge=0.0)
    eps: float = Field(1e-6, gt=0.0)


class HierarchySection(_Strict):
    enabled: bool = False
    eta: float = Field(0.2, gt=0.0, le=1.0)


class NetworkSection(_Strict):
    conv: list[tuple[int, int, int]] = [(16, 3, 1), (32, 3, 1)]
    fc: list[int] = [48]


class LearnerSection(_Strict):
    gamma: float = Field(0.9, gt=0.0, lt=1.0)
    batch_size: int = Field(10, ge=1)
    lr: float = Field(3e-4, gt=0.0)
    target_sync: int = Field(100, ge=1)
    learning_starts: int = Field(10, ge=0)
    use_v: bool = True
    use_pruning: bool = True
    epsilon: EpsilonSection = EpsilonSection()
    replay: ReplaySection = ReplaySection()
    hierarchy: HierarchySection = HierarchySection()
    network: NetworkSection = NetworkSection()


class StageSection(_Strict):
    name: str = ""
    object_type: Literal["disk", "block"] = "disk"
    positions: Optional[int] = Field(None, ge=1)
    num_orientations: int = Field(1, ge=1)
    threshold: Optional[float] = None
    hierarchy: Optional[bool] = None  # None inherits learner.hierarchy.enabled


class CurriculumSection(_Strict):
    window: int = Field(100, ge=1)
    threshold: float = 0.8
    episodes: int = Field(2000, ge=0)
    max_steps: Optional[int] = Field(None, ge=1)
    stop_on_solve: bool = True
    abort_on_fail: bool = False
    require_solved: bool = False
    stages: list[StageSection] = [StageSection()]

    @field_validator("stages")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one stage is required")
        return v


class HomcheckSection(_Strict):
    gamma: float = Field(0.9, gt=0.0, lt=1.0)
    tol: float = Field(1e-9, gt=0.0)
    max_states: int = Field(200_000, ge=1)
    expect: Optional[Literal["certified", "refuted"]] = None


class ExperimentConfig(_Strict):
    task: Literal["grid-disk", "block-align"] = "grid-disk"
    seed: int = 0
    output_dir: str = "runs/default"
    agents: list[Literal["deictic", "baseline"]] = ["deictic"]
    grid: GridSection = GridSection()
    deictic: DeicticSection = DeicticSection()
    learner: LearnerSection = LearnerSection()
    baseline: Optional[LearnerSection] = None
    curriculum: CurriculumSection = CurriculumSection()
    homcheck: HomcheckSection = HomcheckSection()

    @model_validator(mode="after")
    def _consistent(self):
        if self.task == "block-align" and self.curriculum.stages[-1].object_type != "block":
            raise ValueError("block-align must end with a block stage")
        if self.task == "grid-disk" and any(s.object_type != "disk" for s in self.curriculum.stages):
            raise ValueError("grid-disk stages must all use disks")
        if any(s.hierarchy for s in self.curriculum.stages) and not self.learner.hierarchy.enabled:
            raise ValueError("a stage enables the hierarchy but learner.hierarchy.enabled is false")
        if "baseline" in self.agents and len(self.curriculum.stages) != 1:
            raise ValueError("the flat baseline has a fixed action set and needs exactly one stage")
        return self

    # -- conversion to runtime objects ------------------------------------------------------

    def env_config(self) -> EnvConfig:
        return EnvConfig(**self.grid.model_dump())

    def deictic_config(self) -> DeicticConfig:
        d = self.deictic
        return DeicticConfig(k=d.k, crop=CropSpec(d.window, d.padding_value, d.interpolation))

    def stages(self) -> list[CurriculumStage]:
        return [CurriculumStage(s.object_type, s.positions, s.num_orientations, s.name or f"stage{i + 1}")
                for i, s in enumerate(self.curriculum.stages)]

    def thresholds(self) -> list[float | None]:
        return [s.threshold for s in self.curriculum.stages]

    def hierarchy_flags(self) -> list[bool | None]:
        return [s.hierarchy for s in self.curriculum.stages]

    def train_config(self, agent: str = "deictic") -> TrainConfig:
        section = self.learner if agent == "deictic" or self.baseline is None else self.baseline
        cur = self.curriculum
        return TrainConfig(
            gamma=section.gamma, batch_size=section.batch_size, lr=section.lr, target_sync=section.target_sync,
            use_v=section.use_v and agent == "deictic", use_pruning=section.use_pruning,
            epsilon=EpsilonSchedule(**section.epsilon.model_dump()),
            replay=ReplayConfig(**section.replay.model_dump()),
            hierarchy=HierarchyConfig(**section.hierarchy.model_dump()),
            conv=tuple(tuple(c) for c in section.network.conv), fc=tuple(section.network.fc),
            learning_starts=section.learning_starts, window=cur.window, threshold=cur.threshold,
            max_episodes=cur.episodes, stop_on_solve=cur.stop_on_solve, abort_on_fail=cur.abort_on_fail,
        )

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None,
                       episodes: int | None = None, stages: list[int] | None = None) -> "ExperimentConfig":
        data = self.model_dump()
        if seed is not None:
            data["seed"] = seed
        if output_dir is not None:
            data["output_dir"] = output_dir
        if episodes is not None:
            data["curriculum"]["episodes"] = episodes
        if stages is not None:
            picked = data["curriculum"]["stages"]
            bad = [i for i in stages if not 1 <= i <= len(picked)]
            if bad:
                raise ConfigError(f"--stages: no stage {bad[0]} (config has {len(picked)})")
            data["curriculum"]["stages"] = [picked[i - 1] for i in stages]
        return validate(data)


def _describe(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def validate(data) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return validate(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
