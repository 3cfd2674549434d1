"""Goal-conditioned policy hierarchy, its offline goal loss and few-shot adaptation.

The high-level policy maps ``(s, g)`` to a skill in three stages: encode the
state, predict the latent reachable one skill-step ahead, and ask the inverse
skill-step dynamics which skill gets there. The low-level skill decoder then
turns that skill into actions for ``H`` environment steps.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (DiagGaussian, ParamSet, Tensor, adam_step, clip_grad_norm, concat, ema_update,
                       gaussian_kl, mlp_forward, reparameterize)
from .dataset import ShiftConfig, sample_goal, sample_start
from .latent import encode_state, inverse_infer, skill_step_fn
from .maze import MazeSpec, reset, reward, step, step_batch, success_mask
from .model import ADAPTABLE, ModelBundle
from .skills import decode_action, prior_dist

log = logging.getLogger(__name__)


class ContractViolation(RuntimeError):
    """A module that must stay frozen during adaptation is trainable."""


def _goal_tensor(bundle, g, dtype) -> Tensor:
    g = np.atleast_2d(np.asarray(g, dtype=dtype))
    return Tensor(bundle.norm.goal(g).astype(dtype))


def generate_goal(f: ParamSet, norm, h_t, g) -> Tensor:
    """Latent skill-step goal predicted from the current latent and the final goal."""
    if not isinstance(h_t, Tensor):
        h_t = Tensor(np.atleast_2d(np.asarray(h_t, dtype=f.dtype)))
    g = Tensor(norm.goal(np.atleast_2d(np.asarray(g, dtype=f.dtype))).astype(f.dtype))
    return mlp_forward(f, concat([h_t, g], axis=1))


def policy_dist(bundle: ModelBundle, h_t: Tensor, g, frozen_rest: bool = True) -> tuple[DiagGaussian, Tensor | None]:
    """Skill distribution of the high-level policy at latent ``h_t``.

    Returns the Gaussian and the generated latent goal (None when the goal
    generator is ablated in favour of a direct head). With ``frozen_rest``
    only the goal generator / direct head is differentiable.
    """
    dtype = bundle["state_encoder"].dtype
    if not bundle.cfg.goal_generator:
        x = concat([h_t, _goal_tensor(bundle, g, dtype)], axis=1)
        return DiagGaussian.from_head(mlp_forward(bundle["direct_policy"], x)), None
    h_hat = generate_goal(bundle["goal_generator"], bundle.norm, h_t, g)
    inv = bundle["inverse_dynamics"]
    inv = inv.detached() if frozen_rest else inv
    return inverse_infer(inv, h_t, h_hat), h_hat


def high_level_policy(bundle: ModelBundle, s_t, g, noise=None) -> np.ndarray:
    """z for each (state, goal) row; zero noise gives the mean skill."""
    s = np.atleast_2d(np.asarray(s_t, dtype=np.float32))
    h = encode_state(bundle["state_encoder"].detached(), bundle.norm, s)
    dist, _ = policy_dist(bundle, h, np.broadcast_to(np.asarray(g, dtype=np.float32), (len(s), 2)))
    noise = np.zeros(dist.mean.shape, dtype=dist.mean.dtype) if noise is None else np.reshape(noise, dist.mean.shape)
    z = reparameterize(dist, noise).data
    return z[0] if np.ndim(s_t) == 1 else z


def act(bundle: ModelBundle, s, g, z_current, steps_into_skill: int, noise=None) -> tuple[np.ndarray, np.ndarray]:
    """One primitive action; a new skill is drawn whenever a skill-step starts."""
    if steps_into_skill % bundle.H == 0 or z_current is None:
        z_current = high_level_policy(bundle, s, g, noise)
    a = decode_action(bundle["skill_decoder"], bundle.norm, s, z_current, bundle.spec.action_bound).data
    return a, z_current


class HierarchicalAgent:
    """Stateful wrapper around :func:`act` that counts skill refreshes."""

    def __init__(self, bundle: ModelBundle, rng: np.random.Generator | None = None):
        self.bundle = bundle
        self.rng = rng
        self.z = None
        self.t = 0
        self.refreshes: list[int] = []

    def __call__(self, s, g) -> np.ndarray:
        noise = None
        if self.t % self.bundle.H == 0:
            self.refreshes.append(self.t)
            if self.rng is not None:
                noise = self.rng.standard_normal(self.bundle.cfg.d_z)
        a, self.z = act(self.bundle, s, g, self.z, self.t, noise)
        self.t += 1
        return a


# -- offline skill-step goal loss -----------------------------------------------


def sg_loss_terms(bundle: ModelBundle, states: np.ndarray, goals: np.ndarray, noise,
                  q: DiagGaussian | None = None) -> "OrderedDict[str, Tensor]":
    """Behaviour-cloning and cyclic-consistency terms, batch means.

    Only the goal generator is trained here: the encoder input is a
    stop-gradient latent, the regression target comes from the EMA encoder,
    and the inverse / skill-step models enter as constants.
    """
    E = bundle["state_encoder"]
    dtype = E.dtype
    B = states.shape[0]
    H = states.shape[1] - 1
    h_t = encode_state(E, bundle.norm, states[:, 0]).detach()
    zero = Tensor(np.zeros((), dtype=dtype))
    if not bundle.cfg.goal_generator:
        if q is None:
            raise ValueError("the direct-policy ablation clones the skill posterior; pass q")
        dist, _ = policy_dist(bundle, h_t, goals)
        return OrderedDict(bc=gaussian_kl(q.detach(), dist).mean(), sanity=zero)
    h_bar = encode_state(bundle["target_encoder"].detached(), bundle.norm, states[:, H])
    h_hat = generate_goal(bundle["goal_generator"], bundle.norm, h_t, goals)
    bc = (h_bar - h_hat).square().sum() * (1.0 / B)
    if not bundle.cfg.sanity_check:
        return OrderedDict(bc=bc, sanity=zero)
    z_hat = reparameterize(inverse_infer(bundle["inverse_dynamics"].detached(), h_t, h_hat), noise)
    reach = skill_step_fn(bundle, detach=True)(h_t, z_hat)
    sanity = (h_hat - reach).square().sum() * (1.0 / B)
    return OrderedDict(bc=bc, sanity=sanity)


def sg_loss(bundle, states, goals, noise, q=None) -> Tensor:
    t = sg_loss_terms(bundle, states, goals, noise, q)
    return t["bc"] + t["sanity"]


# -- critic and adaptation ----------------------------------------------------------


def q_value(critic: ParamSet, h, z) -> Tensor:
    if not isinstance(h, Tensor):
        h = Tensor(np.atleast_2d(np.asarray(h, dtype=critic.dtype)))
    if not isinstance(z, Tensor):
        z = Tensor(np.atleast_2d(np.asarray(z, dtype=critic.dtype)))
    return mlp_forward(critic, concat([h, z], axis=1)).reshape(-1)


def check_freeze(bundle: ModelBundle) -> None:
    loose = [n for n in bundle.modules if n not in ADAPTABLE and n not in bundle.frozen]
    if loose:
        raise ContractViolation(f"modules must be frozen during adaptation: {', '.join(loose)}")


def freeze_for_adaptation(bundle: ModelBundle) -> None:
    bundle.frozen = {n for n in bundle.modules if n not in ADAPTABLE}


def adapt_loss_terms(bundle: ModelBundle, s_t, g, noise) -> "OrderedDict[str, Tensor]":
    """Unweighted value, prior-KL and state-consistency terms (batch means)."""
    check_freeze(bundle)
    E = bundle["state_encoder"]
    dtype = E.dtype
    s_t = np.atleast_2d(np.asarray(s_t, dtype=dtype))
    B = len(s_t)
    h_t = encode_state(E.detached(), bundle.norm, s_t)
    dist, h_hat = policy_dist(bundle, h_t, g)
    z_pi = reparameterize(dist, np.reshape(noise, dist.mean.shape))
    value = -q_value(bundle["critic"].detached(), h_t, z_pi).mean()
    prior = prior_dist(bundle["skill_prior"].detached(), h_t)
    kl = gaussian_kl(dist, prior).mean()
    if h_hat is None:
        consistency = Tensor(np.zeros((), dtype=dtype))
    else:
        reach = skill_step_fn(bundle, detach=True)(h_t, z_pi)
        consistency = (reach - h_hat).square().sum() * (1.0 / B)
    return OrderedDict(value=value, prior_kl=kl, consistency=consistency)


def adapt_loss(bundle, s_t, g, noise, alpha: float, consistency_weight: float = 1.0) -> Tensor:
    t = adapt_loss_terms(bundle, s_t, g, noise)
    return t["value"] + t["prior_kl"] * alpha + t["consistency"] * consistency_weight


def critic_targets(bundle: ModelBundle, r, h_next, done, g, gamma_H: float) -> np.ndarray:
    """r_H + gamma_H * (1 - done) * Q_target(h', z') with z' the current policy's mean skill."""
    dtype = bundle["critic"].dtype
    h_next = Tensor(np.atleast_2d(np.asarray(h_next, dtype=dtype)))
    dist, _ = policy_dist(bundle, h_next, g)
    q_next = q_value(bundle["critic_target"].detached(), h_next, dist.mean.detach()).data
    r = np.asarray(r, dtype=dtype).reshape(-1)
    done = np.asarray(done, dtype=dtype).reshape(-1)
    return (r + gamma_H * (1.0 - done) * q_next).astype(dtype)


def critic_update(bundle: ModelBundle, batch: dict, gamma_H: float, lr: float,
                  ema_rate: float | None = None, grad_clip: float | None = None) -> float:
    """One TD regression step on the critic, then an EMA step on its target."""
    critic = bundle["critic"]
    target = critic_targets(bundle, batch["r"], batch["h_next"], batch["done"], batch["g"], gamma_H)
    critic.zero_grad()
    q = q_value(critic, batch["h"], batch["z"])
    loss = (q - target).square().mean()
    loss.backward()
    grads = critic.grads()
    clip_grad_norm([grads], bundle.cfg.grad_clip if grad_clip is None else grad_clip)
    adam_step(critic, grads, lr)
    ema_update(bundle["critic_target"], critic, bundle.cfg.critic_ema_rate if ema_rate is None else ema_rate)
    return float(loss.data)


# -- episodes -----------------------------------------------------------------------


def hierarchical_controller(bundle: ModelBundle, rng: np.random.Generator | None = None):
    """Batched controller ``(states, goals, t) -> actions`` refreshing skills every H steps."""
    held = {}

    def control(states: np.ndarray, goals: np.ndarray, t: int) -> np.ndarray:
        n = len(states)
        if t % bundle.H == 0 or "z" not in held:
            noise = None if rng is None else rng.standard_normal((n, bundle.cfg.d_z))
            held["z"] = high_level_policy(bundle, states, goals, noise).reshape(n, -1)
        return decode_action(bundle["skill_decoder"], bundle.norm, states, held["z"],
                             bundle.spec.action_bound).data

    return control


def run_episodes(spec: MazeSpec, controller, starts: np.ndarray, goals: np.ndarray, horizon: int) -> dict:
    """Drive ``N`` mazes in lockstep; each stops at its first success."""
    starts = np.asarray(starts, dtype=np.float32).reshape(-1, 2)
    goals = np.asarray(goals, dtype=np.float32).reshape(-1, 2)
    n = len(starts)
    pos = starts.copy()
    vel = np.zeros_like(pos)
    done = np.zeros(n, dtype=bool)
    lengths = np.full(n, horizon, dtype=int)
    for t in range(horizon):
        if done.all():
            break
        a = controller(np.concatenate([pos, vel], axis=1), goals, t)
        new_pos, new_vel = step_batch(spec, pos, vel, a)
        active = ~done
        pos[active] = new_pos[active]
        vel[active] = new_vel[active]
        hit = active & success_mask(pos, goals)
        lengths[hit] = t + 1
        done |= hit
    return {"final_pos": pos, "success": done, "lengths": lengths}


@dataclass
class Transition:
    s: np.ndarray
    z: np.ndarray
    r: float
    s_next: np.ndarray
    done: float
    g: np.ndarray


def collect_episode(bundle: ModelBundle, start, goal, horizon: int, env_cfg,
                    rng: np.random.Generator) -> tuple[list[Transition], bool]:
    """One exploratory episode, returned as skill-step transitions."""
    spec = bundle.spec
    s = reset(spec, start)
    goal = np.asarray(goal, dtype=np.float32)
    transitions: list[Transition] = []
    z = None
    seg_start, seg_r = s, 0.0
    success = False
    for t in range(horizon):
        if t % bundle.H == 0:
            if z is not None:
                transitions.append(Transition(seg_start.as_vector(), z, seg_r, s.as_vector(), 0.0, goal))
            seg_start, seg_r = s, 0.0
            z = high_level_policy(bundle, s.as_vector(), goal, rng.standard_normal(bundle.cfg.d_z))
        a = decode_action(bundle["skill_decoder"], bundle.norm, s.as_vector(), z, spec.action_bound).data
        s = step(spec, s, a)
        r = reward(s, goal, env_cfg)
        seg_r += r
        if r > 0:
            success = True
            break
    if z is not None:
        transitions.append(Transition(seg_start.as_vector(), z, seg_r, s.as_vector(), float(success), goal))
    return transitions, success


_REPLAY_MAGIC = "GLVSA-REPLAY 1"


def save_replay(transitions: list[Transition], path) -> None:
    """Manifest header, blank line, then one little-endian float32 row per transition."""
    d_z = len(transitions[0].z) if transitions else 0
    cols = ["s"] * 4 + ["z"] * d_z + ["r"] + ["s_next"] * 4 + ["done"] + ["g"] * 2
    header = f"{_REPLAY_MAGIC}\ntransitions {len(transitions)}\nd_z {d_z}\ncolumns {len(cols)}\n\n"
    rows = [np.concatenate([t.s, t.z, [t.r], t.s_next, [t.done], t.g]) for t in transitions]
    with open(path, "wb") as fh:
        fh.write(header.encode())
        if rows:
            fh.write(np.asarray(rows, dtype="<f4").tobytes())


def load_replay(path) -> list[Transition]:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n\n")
    lines = raw[:cut].decode().splitlines()
    if lines[0] != _REPLAY_MAGIC:
        raise ValueError("not a replay file")
    meta = dict(line.split() for line in lines[1:])
    n, d_z, ncol = int(meta["transitions"]), int(meta["d_z"]), int(meta["columns"])
    data = np.frombuffer(raw[cut + 2:], dtype="<f4").reshape(n, ncol).astype(np.float32)
    out = []
    for row in data:
        out.append(Transition(row[:4], row[4:4 + d_z], float(row[4 + d_z]), row[5 + d_z:9 + d_z],
                              float(row[9 + d_z]), row[10 + d_z:12 + d_z]))
    return out


def _replay_batch(bundle: ModelBundle, replay: list[Transition], idx: np.ndarray) -> dict:
    E = bundle["state_encoder"].detached()
    s = np.stack([replay[i].s for i in idx])
    s_next = np.stack([replay[i].s_next for i in idx])
    return {
        "s": s,
        "h": encode_state(E, bundle.norm, s).data,
        "z": np.stack([replay[i].z for i in idx]),
        "r": np.array([replay[i].r for i in idx], dtype=np.float32),
        "h_next": encode_state(E, bundle.norm, s_next).data,
        "done": np.array([replay[i].done for i in idx], dtype=np.float32),
        "g": np.stack([replay[i].g for i in idx]),
    }


@dataclass
class FewShotResult:
    bundle: ModelBundle
    shot_success: list = field(default_factory=list)
    replay: list = field(default_factory=list)
    critic_losses: list = field(default_factory=list)
    adapt_losses: list = field(default_factory=list)


def adaptation_step(bundle: ModelBundle, batch: dict, rng: np.random.Generator) -> float:
    cfg = bundle.cfg
    head = "goal_generator" if cfg.goal_generator else "direct_policy"
    params = bundle[head]
    params.zero_grad()
    noise = rng.standard_normal((len(batch["s"]), cfg.d_z))
    loss = adapt_loss(bundle, batch["s"], batch["g"], noise, cfg.alpha, cfg.consistency_weight)
    loss.backward()
    grads = params.grads()
    clip_grad_norm([grads], cfg.grad_clip)
    adam_step(params, grads, cfg.adapt_lr)
    return float(loss.data)


def finetune_fewshot(bundle: ModelBundle, shift: ShiftConfig, n_shots: int, seed: int,
                     env_cfg=None, steps_per_episode: int | None = None) -> FewShotResult:
    """Adapt a copy of ``bundle`` over ``n_shots`` online episodes with eval-region goals.

    After each episode the critic takes TD steps on every skill-step
    transition seen so far and the goal generator takes matching steps on the
    adaptation loss. Everything else stays bit-identical.
    """
    from .maze import EnvConfig

    cfg = bundle.cfg
    env_cfg = env_cfg or EnvConfig(gamma=cfg.gamma, horizon=cfg.horizon)
    steps = cfg.adapt_steps if steps_per_episode is None else steps_per_episode
    adapted = bundle.copy()
    freeze_for_adaptation(adapted)
    head = "goal_generator" if cfg.goal_generator else "direct_policy"
    for name in (head, "critic"):
        p = adapted[name]
        p.step = 0
        for k in p.m:
            p.m[k][...] = 0
            p.v[k][...] = 0
    result = FewShotResult(adapted)
    rng = np.random.default_rng(seed)
    gamma_H = env_cfg.gamma ** cfg.H
    eval_cells = list(shift.eval_cells)
    for _ in range(n_shots):
        goal = sample_goal(adapted.spec, eval_cells, rng)
        start = sample_start(adapted.spec, goal, rng)
        trans, success = collect_episode(adapted, start, goal, env_cfg.horizon, env_cfg, rng)
        result.replay.extend(trans)
        result.shot_success.append(bool(success))
        for _ in range(steps):
            idx = rng.integers(len(result.replay), size=min(cfg.adapt_batch, len(result.replay)))
            batch = _replay_batch(adapted, result.replay, idx)
            result.critic_losses.append(critic_update(adapted, batch, gamma_H, cfg.adapt_lr))
            result.adapt_losses.append(adaptation_step(adapted, batch, rng))
    return result
