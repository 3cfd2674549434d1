"""Skill-aligned latent space: state encoder/decoder and the three dynamics models."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .autodiff import DiagGaussian, ParamSet, Tensor, concat, ema_update, gaussian_kl, mlp_forward
from .skills import repeat_rows


def _t(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def encode_state(E: ParamSet, norm, s) -> Tensor:
    return mlp_forward(E, norm.state(np.asarray(s).astype(E.dtype)))


def decode_state(D: ParamSet, norm, h) -> Tensor:
    return norm.denorm_state(mlp_forward(D, _t(h, D.dtype)))


def _pair(h: Tensor, z: Tensor) -> Tensor:
    if h.data.ndim == 1:
        return concat([h, z], axis=0)
    return concat([h, z], axis=1)


def flat_step(P: ParamSet, h, z) -> Tensor:
    return mlp_forward(P, _pair(_t(h, P.dtype), _t(z, P.dtype)))


def skill_step(Pss: ParamSet, h, z) -> Tensor:
    return mlp_forward(Pss, _pair(_t(h, Pss.dtype), _t(z, Pss.dtype)))


def compose_flat(P: ParamSet, h, z, n: int) -> Tensor:
    h = _t(h, P.dtype)
    for _ in range(n):
        h = flat_step(P, h, z)
    return h


def inverse_infer(Pinv: ParamSet, h_t, h_tH) -> DiagGaussian:
    return DiagGaussian.from_head(mlp_forward(Pinv, _pair(_t(h_t, Pinv.dtype), _t(h_tH, Pinv.dtype))))


def skill_step_fn(bundle, detach: bool = False):
    """H-step latent predictor: the skill-step model, or H chained flat steps when it is ablated."""
    if bundle.cfg.skill_step_dynamics:
        P = bundle["skill_dynamics"]
        P = P.detached() if detach else P
        return lambda h, z: skill_step(P, h, z)
    F = bundle["flat_dynamics"]
    F = F.detached() if detach else F
    return lambda h, z: compose_flat(F, h, z, bundle.H)


def encode_sequence(E: ParamSet, norm, states: np.ndarray) -> Tensor:
    """(B, L, 4) -> (B, L, d_h)."""
    B, L, _ = states.shape
    h = encode_state(E, norm, states.reshape(B * L, -1))
    return h.reshape(B, L, -1)


def model_loss_terms(bundle, states: np.ndarray, z: Tensor, q: DiagGaussian) -> "OrderedDict[str, Tensor]":
    """The four model-loss components, each a batch mean.

    Latents ``h`` come from the online encoder, regression targets from the
    EMA target encoder. The inverse-dynamics term sees both latents and the
    posterior through stop-gradients.
    """
    E, D = bundle["state_encoder"], bundle["state_decoder"]
    dtype = E.dtype
    B, L, S = states.shape
    H = L - 1
    states = states.astype(dtype)
    h = encode_sequence(E, bundle.norm, states)
    h_bar = encode_sequence(bundle["target_encoder"].detached(), bundle.norm, states)
    d_h = h.shape[-1]
    inv_B = 1.0 / B

    h_seq = h[:, :H].reshape(B * H, d_h)
    recon = (decode_state(D, bundle.norm, h_seq) - states[:, :H].reshape(B * H, S)).square().sum() * inv_B

    z_rep = repeat_rows(z, H)
    flat_pred = flat_step(bundle["flat_dynamics"], h_seq, z_rep)
    flat = (flat_pred - h_bar[:, 1:].reshape(B * H, d_h)).square().sum() * inv_B

    h0 = h[:, 0]
    hH = h[:, H]
    if bundle.cfg.skill_step_dynamics:
        ss_pred = skill_step(bundle["skill_dynamics"], h0, z)
        ss = (ss_pred - h_bar[:, H]).square().sum() * inv_B
    else:
        ss = Tensor(np.zeros((), dtype=dtype))

    p_inv = inverse_infer(bundle["inverse_dynamics"], h0.detach(), hH.detach())
    inverse = gaussian_kl(q.detach(), p_inv).mean()
    return OrderedDict(recon=recon, flat=flat, skill_step=ss, inverse=inverse)


def model_loss(bundle, states, z, q) -> Tensor:
    terms = model_loss_terms(bundle, states, z, q)
    return terms["recon"] + terms["flat"] + terms["skill_step"] + terms["inverse"]


def align_targets(bundle, rate: float | None = None) -> None:
    ema_update(bundle["target_encoder"], bundle["state_encoder"],
               bundle.cfg.ema_rate if rate is None else rate)
