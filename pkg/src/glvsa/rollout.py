"""Model-guided rollouts: imagine skill sequences in latent space and decode them."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import EXPERT, SYNTHETIC, DatasetStore, Trajectory, append_synthetic, goal_coverage
from .latent import decode_state, encode_state, flat_step, skill_step
from .maze import MazeSpec
from .skills import decode_action, sample_prior

log = logging.getLogger(__name__)


@dataclass
class RolloutConfig:
    branches: int = 16
    skills: int = 3
    decode: bool = True
    seed: int = 0
    max_clamped_fraction: float = 0.2

    def __post_init__(self):
        if self.branches < 0 or self.skills < 0:
            raise ValueError("rollout counts must be nonnegative")


@dataclass
class LatentRollout:
    h: np.ndarray                 # (n_steps + 1, d_h)
    z: np.ndarray                 # (K, d_z); skill j is active for steps j*H .. (j+1)*H - 1
    H: int
    truncated: bool = False
    diagnostic: str = ""

    @property
    def n_transitions(self) -> int:
        return len(self.h) - 1


def select_branching_states(store: DatasetStore, n: int, rng: np.random.Generator,
                            iteration: int | None = None) -> list[tuple[int, int]]:
    """Uniform (trajectory, offset) pairs.

    With ``iteration`` given, synthetic trajectories appended during that
    iteration or later are not eligible yet.
    """
    if not store.trajectories:
        raise ValueError("cannot branch from an empty store")
    if n == 0:
        return []
    eligible = [i for i, t in enumerate(store.trajectories)
                if t.provenance == EXPERT or iteration is None or t.iteration_born < iteration]
    out = []
    for _ in range(n):
        i = eligible[int(rng.integers(len(eligible)))]
        out.append((i, int(rng.integers(len(store.trajectories[i])))))
    return out


def latent_rollout(bundle, s_branch, K: int, rng: np.random.Generator) -> LatentRollout:
    """Sample K skills from the prior and unroll H flat steps for each.

    When the skill-step model is enabled it supplies the latent at each
    skill boundary, which keeps long chains anchored; otherwise every step is
    a flat step.
    """
    H = bundle.H
    h = encode_state(bundle["state_encoder"], bundle.norm, np.atleast_2d(s_branch)).data
    hs = [h[0]]
    zs = []
    for _ in range(K):
        h_start = h
        z = sample_prior(bundle["skill_prior"], h_start, rng.standard_normal((1, bundle.cfg.d_z)))
        zs.append(z[0])
        for k in range(H):
            if k == H - 1 and bundle.cfg.skill_step_dynamics:
                h = skill_step(bundle["skill_dynamics"], h_start, z).data
            else:
                h = flat_step(bundle["flat_dynamics"], h, z).data
            if not np.isfinite(h).all():
                msg = f"non-finite latent after {len(hs) - 1} steps"
                log.warning("rollout truncated: %s", msg)
                return LatentRollout(np.array(hs), np.array(zs), H, True, msg)
            hs.append(h[0])
    d_z = bundle.cfg.d_z
    return LatentRollout(np.array(hs, dtype=np.float32).reshape(-1, bundle.cfg.d_h),
                         np.array(zs, dtype=np.float32).reshape(-1, d_z), H)


def nearest_free_point(spec: MazeSpec, pos: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    cs = spec.cell_size
    best, best_d = None, np.inf
    for r, c in spec.free_cells():
        lo = np.array([c * cs + margin, r * cs + margin])
        hi = np.array([(c + 1) * cs - margin, (r + 1) * cs - margin])
        p = np.clip(pos, lo, hi)
        d = float(np.sum((p - pos) ** 2))
        if d < best_d:
            best, best_d = p, d
    return best.astype(np.float32)


def decode_trajectory(bundle, rollout: LatentRollout) -> tuple[Trajectory, int]:
    """Raw states from the state decoder, actions from the skill decoder.

    States that land in a wall are moved to the nearest free point and
    velocities are clamped; returns the trajectory and the clamp count.
    """
    spec = bundle.spec
    states = decode_state(bundle["state_decoder"], bundle.norm, rollout.h.astype(np.float32)).data
    states = states.astype(np.float32).reshape(-1, 4)
    clamped = 0
    for i in range(len(states)):
        if not spec.is_free(states[i, :2]):
            states[i, :2] = nearest_free_point(spec, states[i, :2])
            clamped += 1
    states[:, 2:] = np.clip(states[:, 2:], -spec.max_speed, spec.max_speed)
    n = rollout.n_transitions
    if n == 0:
        return Trajectory(states[:1], np.zeros((0, 2), np.float32), SYNTHETIC), clamped
    skill_idx = np.minimum(np.arange(n) // rollout.H, len(rollout.z) - 1)
    actions = decode_action(bundle["skill_decoder"], bundle.norm, states[:n], rollout.z[skill_idx],
                            spec.action_bound).data
    return Trajectory(states[: n + 1], actions.astype(np.float32), SYNTHETIC), clamped


@dataclass
class RolloutStats:
    iteration: int
    selected: int = 0
    appended: int = 0
    rejected: int = 0
    truncated: int = 0
    clamped_states: int = 0
    coverage_before: int = 0
    coverage_after: int = 0
    diagnostics: list = field(default_factory=list)


def run_iteration_rollouts(bundle, store: DatasetStore, cfg: RolloutConfig, iteration: int,
                           coverage_bin: float = 0.25) -> RolloutStats:
    rng = np.random.default_rng([cfg.seed, iteration])
    stats = RolloutStats(iteration, coverage_before=goal_coverage(store, coverage_bin))
    branches = select_branching_states(store, cfg.branches, rng, iteration)
    stats.selected = len(branches)
    new = []
    for ti, off in branches:
        s0 = store.trajectories[ti].states[off]
        ro = latent_rollout(bundle, s0, cfg.skills, rng)
        if ro.truncated:
            stats.truncated += 1
            stats.diagnostics.append(ro.diagnostic)
        if not cfg.decode:
            continue
        traj, clamped = decode_trajectory(bundle, ro)
        stats.clamped_states += clamped
        if clamped > cfg.max_clamped_fraction * len(traj):
            stats.rejected += 1
            stats.diagnostics.append(f"branch ({ti}, {off}): {clamped}/{len(traj)} states clamped")
            continue
        new.append(traj)
    problems = append_synthetic(store, new, iteration)
    stats.rejected += len(problems)
    stats.diagnostics.extend(problems)
    stats.appended = len(new) - len(problems)
    stats.coverage_after = goal_coverage(store, coverage_bin)
    return stats
