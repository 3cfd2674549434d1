"""Skill-step latent world model and goal-conditioned skill policy for offline RL in a point maze.

Everything runs on numpy through a small reverse-mode autodiff engine in
:mod:`glvsa.autodiff`. The usual entry points:

>>> from glvsa import TrainConfig, train_offline, eval_all_shifts
>>> res = train_offline(TrainConfig(epochs=1, iterations=1))     # doctest: +SKIP
>>> eval_all_shifts(res.bundle)                                  # doctest: +SKIP
"""
from .ablation import run_ablation
from .config import ConfigError, TrainConfig, load_config, save_config
from .dataset import (DatasetStore, ShiftLevel, Trajectory, generate_expert_dataset, goal_coverage,
                      load_dataset, make_shift, sample_batch, save_dataset)
from .maze import MazeSpec, default_maze, load_maze, normalized_score
from .model import ModelBundle
from .policy import HierarchicalAgent, act, finetune_fewshot
from .rollout import RolloutConfig, latent_rollout, run_iteration_rollouts
from .trainer import (eval_all_shifts, eval_zeroshot, load_checkpoint, save_checkpoint, total_loss,
                      train_offline)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DatasetStore", "HierarchicalAgent", "MazeSpec", "ModelBundle", "RolloutConfig",
    "ShiftLevel", "TrainConfig", "Trajectory", "act", "default_maze", "eval_all_shifts", "eval_zeroshot",
    "finetune_fewshot", "generate_expert_dataset", "goal_coverage", "latent_rollout", "load_checkpoint",
    "load_config", "load_dataset", "load_maze", "make_shift", "normalized_score", "run_ablation",
    "run_iteration_rollouts", "sample_batch", "save_checkpoint", "save_config", "save_dataset",
    "total_loss", "train_offline",
]
