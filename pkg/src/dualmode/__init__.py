"""Dual-mode (General / Personalized) reasoning policies trained with
prefix-forced group-relative RL on a synthetic persona environment."""

from .config import ExperimentConfig, load_config
from .core import (
    AdvantageAssignment,
    AlignmentCondition,
    ConfigError,
    ContractError,
    ModePrefix,
    RolloutGroup,
    TaskInstance,
    TaskKind,
    Trajectory,
)
from .dualgrpo import RLConfig, Variant
from .evaluation import EvalReport, evaluate
from .policy import PolicyDims, PolicyParams, init_params
from .synthenv import EnvConfig, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "AdvantageAssignment", "AlignmentCondition", "ConfigError", "ContractError", "EnvConfig",
    "EvalReport", "ExperimentConfig", "ModePrefix", "PolicyDims", "PolicyParams", "RLConfig",
    "RolloutGroup", "TaskInstance", "TaskKind", "Trajectory", "Variant", "evaluate",
    "generate_dataset", "init_params", "load_config",
]
