"""Desk-scale learning protocols: baseline scaling, deictic vs. flat, curriculum ablation.

Each protocol returns plain numbers so callers (tests, scripts) can apply
their own acceptance rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .env import CurriculumStage, EnvConfig
from .learner import (EpsilonSchedule, ReplayConfig, TrainConfig, episodes_to_threshold, rolling_mean,
                      run_baseline, run_curriculum)
from .mapping import CropSpec, DeicticConfig

# shared exploration schedule for the grid-disk comparisons (env steps)
GRID_DISK_EPSILON = EpsilonSchedule(1.0, 0.1, 2000)


def grid_disk_config(agent: str, budget: int) -> TrainConfig:
    return TrainConfig(epsilon=GRID_DISK_EPSILON, max_episodes=budget, use_v=(agent == "deictic"),
                       use_pruning=True, replay=ReplayConfig(mode="uniform"))


def episodes_to_solve(agent: str, size: int, seed: int, budget: int = 20_000, threshold: float = 0.8,
                      window: int = 100) -> int:
    """Episodes until the rolling mean reward reaches ``threshold``; censored at ``budget``."""
    env_cfg = EnvConfig(width=size, height=size, num_objects=2)
    stage = CurriculumStage("disk", name=f"grid{size}")
    cfg = grid_disk_config(agent, budget)
    if agent == "baseline":
        result = run_baseline(env_cfg, stage, cfg, seed)
    else:
        result = run_curriculum([stage], env_cfg, DeicticConfig(2, CropSpec(3)), cfg, seed)
    hit = episodes_to_threshold(result.curve.rewards(), window, threshold)
    return budget if hit is None else hit


# -- curriculum ablation ------------------------------------------------------------------------

DESK_ENV = EnvConfig(width=17, height=17, num_objects=2, block_length=5)
DESK_DEICTIC = DeicticConfig(k=2, crop=CropSpec(9))
DESK_STAGES = (
    CurriculumStage("disk", 5, 2, "disks-25x2"),
    CurriculumStage("disk", 5, 8, "disks-25x8"),
    CurriculumStage("block", 5, 2, "blocks-25x2"),
    CurriculumStage("block", 5, 4, "blocks-25x4"),
    CurriculumStage("block", 9, 8, "blocks-81x8"),
)


def desk_train_config(max_episodes: int = 1500) -> TrainConfig:
    return TrainConfig(epsilon=EpsilonSchedule(0.5, 0.1, 2000), max_episodes=max_episodes,
                       replay=ReplayConfig(mode="prioritized"), use_v=True, use_pruning=True)


@dataclass
class AblationOutcome:
    seed: int
    curriculum_steps: int | None  # env steps until the last stage first reaches the target
    curriculum_reached: bool
    direct_best: float  # best rolling mean of the direct run within the same step budget
    direct_steps: int
    stage_episodes: list[int] = field(default_factory=list)

    @property
    def supports_claim(self) -> bool:
        return self.curriculum_reached and self.direct_best < 0.5


def curriculum_ablation(seed: int, stages: Sequence[CurriculumStage] = DESK_STAGES, env_cfg: EnvConfig = DESK_ENV,
                        deictic: DeicticConfig = DESK_DEICTIC, cfg: TrainConfig | None = None,
                        target: float = 0.7, window: int = 100) -> AblationOutcome:
    """Curriculum run to ``target`` on the last stage, then a from-scratch run with the same step budget."""
    cfg = cfg or desk_train_config()
    thresholds = [None] * (len(stages) - 1) + [target]
    cur = run_curriculum(stages, env_cfg, deictic, cfg, seed, thresholds=thresholds)
    last = len(stages)
    reached = cur.stages[-1].stage == last and cur.stages[-1].solved
    budget = cur.total_steps
    direct_cfg = TrainConfig(**{**cfg.__dict__, "max_episodes": 10 ** 9, "stop_on_solve": False})
    direct = run_curriculum([stages[-1]], env_cfg, deictic, direct_cfg, seed + 10_000, max_steps=budget)
    roll = rolling_mean(direct.curve.rewards(), window)
    best = float(np.nanmax(roll)) if np.isfinite(roll).any() else 0.0
    return AblationOutcome(seed, budget if reached else None, reached, best, direct.total_steps,
                           [s.episodes for s in cur.stages])


def median(values: Iterable[float]) -> float:
    v = sorted(values)
    if not v:
        return math.nan
    return float(np.median(v))
