"""Temporally straightened latent world models for gradient-based planning."""
from .envs import PlanTask, TrajectoryDataset, generate_dataset, make_env, sample_goal_task
from .errors import StraightWMError
from .model import ModelConfig, WorldModel, straightening_cosine
from .planning import PlanConfig, run_mpc, run_open_loop
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "PlanConfig",
    "PlanTask",
    "StraightWMError",
    "TrainConfig",
    "TrajectoryDataset",
    "WorldModel",
    "generate_dataset",
    "make_env",
    "run_mpc",
    "run_open_loop",
    "sample_goal_task",
    "straightening_cosine",
    "train",
]
