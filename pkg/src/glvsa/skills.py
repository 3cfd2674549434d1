"""Skill VAE: encoder q(z | sub-trajectory), decoder / low-level policy, skill prior."""
from __future__ import annotations

import numpy as np

from .autodiff import DiagGaussian, ParamSet, Tensor, UsageError, concat, gaussian_kl, mlp_forward, reparameterize
from .dataset import Batch, SubTrajectory


def as_arrays(sub) -> tuple[np.ndarray, np.ndarray]:
    """(states (B, H+1, 4), actions (B, H, 2)) from a SubTrajectory, Batch or pair."""
    if isinstance(sub, SubTrajectory):
        states, actions = sub.states[None], sub.actions[None]
    elif isinstance(sub, Batch):
        states, actions = sub.states, sub.actions
    else:
        states, actions = sub
    states, actions = np.asarray(states), np.asarray(actions)
    if states.ndim != 3 or actions.ndim != 3 or states.shape[1] != actions.shape[1] + 1:
        raise UsageError(f"sub-trajectory shape mismatch: states {states.shape}, actions {actions.shape}")
    return states, actions


def repeat_rows(t: Tensor, n: int) -> Tensor:
    """(B, d) -> (B*n, d) with each row repeated ``n`` times, differentiably."""
    B, d = t.shape
    return (t.reshape(B, 1, d) + np.zeros((1, n, 1), dtype=t.dtype)).reshape(B * n, d)


def encoder_input(norm, states: np.ndarray, actions: np.ndarray, dtype) -> np.ndarray:
    B = states.shape[0]
    s0 = norm.state(states[:, 0].astype(dtype))
    return np.concatenate([s0, actions.reshape(B, -1).astype(dtype)], axis=1).astype(dtype)


def encode_skill(enc: ParamSet, norm, sub, noise) -> tuple[Tensor, DiagGaussian]:
    states, actions = as_arrays(sub)
    expected = enc["l0.w"].shape[0]
    x = encoder_input(norm, states, actions, enc.dtype)
    if x.shape[1] != expected:
        raise UsageError(f"encoder expects horizon {(expected - 4) // 2}, got {actions.shape[1]}")
    q = DiagGaussian.from_head(mlp_forward(enc, x))
    return reparameterize(q, np.reshape(noise, q.mean.shape)), q


def decode_action(dec: ParamSet, norm, state, z, bound: float = 1.0) -> Tensor:
    """Bounded action for each (state, skill) row."""
    state = np.asarray(state)
    single = state.ndim == 1
    s = norm.state(np.atleast_2d(state).astype(dec.dtype))
    if not isinstance(z, Tensor):
        z = Tensor(np.atleast_2d(np.asarray(z, dtype=dec.dtype)))
    elif z.data.ndim == 1:
        z = z.reshape(1, -1)
    out = mlp_forward(dec, concat([Tensor(s), z], axis=1)).tanh() * bound
    return out.reshape(-1) if single else out


def reconstruction_term(dec: ParamSet, norm, states: np.ndarray, actions: np.ndarray, z: Tensor,
                        bound: float = 1.0) -> Tensor:
    """Batch mean of sum_i ||pi_L(s_i, z) - a_i||^2 over the H steps."""
    B, H, _ = actions.shape
    s = states[:, :H].reshape(B * H, -1)
    pred = decode_action(dec, norm, s, repeat_rows(z, H), bound)
    err = (pred - actions.reshape(B * H, -1).astype(dec.dtype)).square()
    return err.sum() * (1.0 / B)


def skill_kl_term(q: DiagGaussian) -> Tensor:
    """Batch mean of KL(q || N(0, I))."""
    return gaussian_kl(q, DiagGaussian.standard(q.mean.shape, q.mean.dtype)).mean()


def skill_loss(enc: ParamSet, dec: ParamSet, norm, sub, beta: float, noise, bound: float = 1.0) -> Tensor:
    states, actions = as_arrays(sub)
    z, q = encode_skill(enc, norm, (states, actions), noise)
    return reconstruction_term(dec, norm, states, actions, z, bound) + skill_kl_term(q) * beta


def prior_dist(prior: ParamSet, h) -> DiagGaussian:
    if not isinstance(h, Tensor):
        h = Tensor(np.asarray(h, dtype=prior.dtype))
    return DiagGaussian.from_head(mlp_forward(prior, h))


def prior_loss(prior: ParamSet, h_t: Tensor, q: DiagGaussian) -> Tensor:
    """Batch mean of KL(p(z | sg h_t) || sg q); only the prior receives gradient."""
    return gaussian_kl(prior_dist(prior, h_t.detach()), q.detach()).mean()


def sample_prior(prior: ParamSet, h_t, noise) -> np.ndarray:
    p = prior_dist(prior, h_t)
    return reparameterize(p, np.reshape(noise, p.mean.shape)).data
