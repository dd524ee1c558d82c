"""Deictic image mapping for move-effect systems.

Modules: ``env`` (grid simulator), ``mapping`` (crops and abstract maps),
``homlab`` (exact homomorphism checks), ``nn`` (numpy networks), ``replay``,
``learner`` (abstract-space DQN, flat baseline, curriculum) and ``cli``.
"""

from .core import Action, Effector, Pose
from .env import CurriculumStage, EnvConfig, MoveEffectEnv
from .mapping import AbstractAction, AbstractState, CropSpec, DeicticConfig, action_map, crop, state_map

__all__ = [
    "AbstractAction", "AbstractState", "Action", "CropSpec", "CurriculumStage", "DeicticConfig", "Effector",
    "EnvConfig", "MoveEffectEnv", "Pose", "action_map", "crop", "state_map",
]
__version__ = "0.1.0"
