"""Run configuration, read from TOML with unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # skill / latent sizes
    H: int = 10
    d_z: int = 8
    d_h: int = 16
    hidden: int = 64
    hidden_layers: int = 2
    # loss coefficients
    beta: float = 0.1
    alpha: float = 0.1
    consistency_weight: float = 1.0
    w_skill: float = 1.0
    w_prior: float = 1.0
    w_model: float = 1.0
    w_sg: float = 1.0
    # optimisation
    lr: float = 1e-3
    grad_clip: float = 10.0
    ema_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 40
    batches_per_epoch: int = 50
    iterations: int = 3
    goal_mode: str = "future"
    # data
    n_expert: int = 500
    synthetic_fraction: float | None = None
    maze_file: str | None = None
    anchor: list = field(default_factory=lambda: [1, 1])
    train_fraction: float = 0.4
    eval_fraction: float = 0.2
    coverage_bin: float = 0.25
    # model-guided rollouts
    branches: int = 16
    skills_per_rollout: int = 3
    max_clamped_fraction: float = 0.2
    # environment / evaluation
    gamma: float = 0.99
    horizon: int = 400
    eval_episodes: int = 20
    # few-shot adaptation
    n_shots: int = 25
    adapt_steps: int = 50
    adapt_lr: float = 3e-4
    adapt_batch: int = 64
    critic_ema_rate: float = 0.05
    # ablation switches
    skill_step_dynamics: bool = True
    goal_generator: bool = True
    sanity_check: bool = True
    # seeds
    seed: int = 0
    data_seed: int = 0
    eval_seed: int = 1234

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive_ints = ("H", "d_z", "d_h", "hidden", "hidden_layers", "batch_size", "epochs",
                         "batches_per_epoch", "n_expert", "horizon")
        for name in positive_ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("iterations", "branches", "skills_per_rollout", "eval_episodes", "n_shots",
                     "adapt_steps"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("beta", "alpha", "consistency_weight", "w_skill", "w_prior", "w_model", "w_sg",
                     "lr", "adapt_lr", "grad_clip"):
            if float(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("ema_rate", "critic_ema_rate", "train_fraction", "eval_fraction",
                     "max_clamped_fraction"):
            if not 0.0 <= float(getattr(self, name)) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.goal_mode not in ("future", "final"):
            raise ConfigError(f"goal_mode must be 'future' or 'final', got {self.goal_mode!r}")
        if self.synthetic_fraction is not None and not 0.0 <= self.synthetic_fraction <= 1.0:
            raise ConfigError("synthetic_fraction must lie in [0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def architecture_hash(self) -> str:
        """Identity of everything that shapes the parameter tensors."""
        keys = ("H", "d_z", "d_h", "hidden", "hidden_layers", "goal_generator")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_FIELDS = {f.name for f in fields(TrainConfig)}


def config_from_dict(d: dict) -> TrainConfig:
    unknown = sorted(set(d) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: TrainConfig) -> str:
    """TOML text for ``cfg`` (``None`` values are omitted)."""
    lines = []
    for k, v in cfg.to_dict().items():
        if v is None:
            continue
        if isinstance(v, bool):
            lines.append(f"{k} = {'true' if v else 'false'}")
        elif isinstance(v, str):
            lines.append(f"{k} = {json.dumps(v)}")
        elif isinstance(v, list):
            lines.append(f"{k} = [{', '.join(repr(x) for x in v)}]")
        else:
            lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
