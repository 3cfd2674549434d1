"""The bundle of learnable modules shared by the skill, latent and policy code."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .autodiff import DTYPE, ParamSet, Tensor, init_mlp
from .config import TrainConfig
from .maze import ACTION_DIM, STATE_DIM, MazeSpec

# Modules a few-shot adaptation run is allowed to touch.
ADAPTABLE = ("goal_generator", "direct_policy", "critic", "critic_target")
EMA_TARGETS = ("target_encoder", "critic_target")


class StateNormalizer:
    """Fixed affine map taking raw states/goals into roughly [-1, 1]."""

    def __init__(self, spec: MazeSpec):
        ext = spec.extent.astype(np.float64)
        self.pos_scale = (2.0 / ext).astype(DTYPE)
        self.pos_shift = np.full(2, -1.0, dtype=DTYPE)
        vel = np.full(2, 1.0 / spec.max_speed, dtype=DTYPE)
        self.state_scale = np.concatenate([self.pos_scale, vel]).astype(DTYPE)
        self.state_shift = np.concatenate([self.pos_shift, np.zeros(2, DTYPE)]).astype(DTYPE)

    def state(self, s) -> np.ndarray:
        s = np.asarray(s)
        return (s * self.state_scale + self.state_shift).astype(s.dtype if s.dtype == np.float64 else DTYPE)

    def goal(self, g) -> np.ndarray:
        g = np.asarray(g)
        return (g * self.pos_scale + self.pos_shift).astype(g.dtype if g.dtype == np.float64 else DTYPE)

    def denorm_state(self, t: Tensor) -> Tensor:
        """Differentiable inverse of :meth:`state`."""
        inv = (1.0 / self.state_scale.astype(np.float64)).astype(t.dtype)
        return (t - self.state_shift.astype(t.dtype)) * inv


class ModelBundle:
    """All parameter sets, the normaliser and bookkeeping for one run.

    ``frozen`` names modules that must not be updated; the trainer and the
    adaptation loop both honour it.
    """

    def __init__(self, cfg: TrainConfig, spec: MazeSpec, seed: int | None = None, dtype=DTYPE):
        self.cfg = cfg
        self.spec = spec
        self.norm = StateNormalizer(spec)
        self.iteration = 0
        self.frozen: set[str] = set()
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        hid = [cfg.hidden] * cfg.hidden_layers
        H, dz, dh = cfg.H, cfg.d_z, cfg.d_h
        sizes = OrderedDict([
            ("skill_encoder", [STATE_DIM + ACTION_DIM * H, *hid, 2 * dz]),
            ("skill_decoder", [STATE_DIM + dz, *hid, ACTION_DIM]),
            ("skill_prior", [dh, *hid, 2 * dz]),
            ("state_encoder", [STATE_DIM, *hid, dh]),
            ("state_decoder", [dh, *hid, STATE_DIM]),
            ("flat_dynamics", [dh + dz, *hid, dh]),
            ("skill_dynamics", [dh + dz, *hid, dh]),
            ("inverse_dynamics", [2 * dh, *hid, 2 * dz]),
            ("goal_generator", [dh + 2, *hid, dh]),
            ("critic", [dh + dz, *hid, 1]),
        ])
        if not cfg.goal_generator:
            sizes["direct_policy"] = [dh + 2, *hid, 2 * dz]
        # the critic starts at Q = 0 so adaptation is not steered by an untrained value surface
        self.modules: "OrderedDict[str, ParamSet]" = OrderedDict(
            (name, init_mlp(s, rng, zero_last=(name == "critic"), dtype=dtype)) for name, s in sizes.items()
        )
        self.modules["target_encoder"] = self.modules["state_encoder"].copy()
        self.modules["critic_target"] = self.modules["critic"].copy()

    def __getitem__(self, name: str) -> ParamSet:
        return self.modules[name]

    def __contains__(self, name: str) -> bool:
        return name in self.modules

    @property
    def H(self) -> int:
        return self.cfg.H

    def trainable(self, exclude=()) -> list[str]:
        """Modules the offline optimiser updates (EMA targets and critic excluded)."""
        skip = set(EMA_TARGETS) | {"critic"} | self.frozen | set(exclude)
        return [n for n in self.modules if n not in skip]

    def zero_grad(self) -> None:
        for p in self.modules.values():
            p.zero_grad()

    def astype(self, dtype) -> "ModelBundle":
        out = ModelBundle.__new__(ModelBundle)
        out.cfg, out.spec, out.norm = self.cfg, self.spec, self.norm
        out.iteration = self.iteration
        out.frozen = set(self.frozen)
        out.modules = OrderedDict((k, p.astype(dtype)) for k, p in self.modules.items())
        return out

    def copy(self) -> "ModelBundle":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self["state_encoder"].dtype

    def tensors(self):
        """Every parameter tensor as ``(qualified name, array)``, in stable order."""
        for mod, params in self.modules.items():
            for name, t in params.items():
                yield f"{mod}/{name}", t.data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.tensors()}
