import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glvsa.autodiff import DiagGaussian, Tensor, UsageError, gaussian_kl
from glvsa.latent import (align_targets, compose_flat, decode_state, encode_state, flat_step, inverse_infer,
                          model_loss, model_loss_terms, skill_step)
from glvsa.skills import (decode_action, encode_skill, prior_dist, prior_loss, reconstruction_term,
                          sample_prior, skill_kl_term, skill_loss)

from oracles import central_difference_check, loss_closures


def _zero(params):
    for t in params.tensors.values():
        t.data[...] = 0


def _pair(batch, dtype=np.float32):
    return batch.states.astype(dtype), batch.actions.astype(dtype)


def _noise(batch, cfg, seed=0):
    return np.random.default_rng(seed).standard_normal((batch.size, cfg.d_z))


# -- skill encoder / decoder ---------------------------------------------------------


def test_zero_encoder_gives_standard_posterior(small_bundle, small_batch, small_cfg):
    _zero(small_bundle["skill_encoder"])
    noise = _noise(small_batch, small_cfg)
    z, q = encode_skill(small_bundle["skill_encoder"], small_bundle.norm, _pair(small_batch), noise)
    assert not q.mean.data.any() and not q.log_std.data.any()
    np.testing.assert_allclose(z.data, noise, rtol=1e-6)


def test_encoder_deterministic_and_sensitive(small_bundle, small_batch, small_cfg):
    enc, norm = small_bundle["skill_encoder"], small_bundle.norm
    noise = _noise(small_batch, small_cfg)
    a, _ = encode_skill(enc, norm, _pair(small_batch), noise)
    b, _ = encode_skill(enc, norm, _pair(small_batch), noise)
    assert a.data.tobytes() == b.data.tobytes()
    states, actions = _pair(small_batch)
    bumped = actions.copy()
    bumped[:, 1, 0] += 0.5
    _, q0 = encode_skill(enc, norm, (states, actions), noise)
    _, q1 = encode_skill(enc, norm, (states, bumped), noise)
    assert np.abs(q0.mean.data - q1.mean.data).max() > 1e-4


def test_encoder_rejects_wrong_horizon(small_bundle, small_batch, small_cfg):
    states, actions = _pair(small_batch)
    noise = np.zeros((small_batch.size, small_cfg.d_z))
    with pytest.raises(UsageError):
        encode_skill(small_bundle["skill_encoder"], small_bundle.norm, (states[:, :-1], actions[:, :-1]), noise)
    with pytest.raises(UsageError):
        encode_skill(small_bundle["skill_encoder"], small_bundle.norm, (states[:, :-2], actions), noise)


def test_zero_decoder_outputs_zero_action(small_bundle):
    _zero(small_bundle["skill_decoder"])
    a = decode_action(small_bundle["skill_decoder"], small_bundle.norm, np.array([1.5, 1.5, 0, 0]), np.ones(3))
    np.testing.assert_array_equal(a.data, [0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_decoder_actions_always_bounded(seed, scale):
    from glvsa.config import TrainConfig
    from glvsa.maze import default_maze
    from glvsa.model import ModelBundle

    from conftest import SMALL
    bundle = ModelBundle(TrainConfig(**SMALL), default_maze(), seed=seed % 1000)
    rng = np.random.default_rng(seed)
    for t in bundle["skill_decoder"].tensors.values():
        t.data *= scale
    s = rng.uniform(-10, 10, (16, 4))
    z = rng.normal(0, 10, (16, 3))
    a = decode_action(bundle["skill_decoder"], bundle.norm, s, z, bundle.spec.action_bound).data
    assert np.isfinite(a).all() and np.abs(a).max() <= 1.0


def test_skill_loss_recomposes(small_bundle, small_batch, small_cfg):
    enc, dec, norm = small_bundle["skill_encoder"], small_bundle["skill_decoder"], small_bundle.norm
    noise = _noise(small_batch, small_cfg)
    states, actions = _pair(small_batch)
    z, q = encode_skill(enc, norm, (states, actions), noise)
    recon = float(reconstruction_term(dec, norm, states, actions, z).data)
    kl = float(skill_kl_term(q).data)
    # hand-composed reconstruction: per-row sums averaged over the batch
    hand = 0.0
    for b in range(small_batch.size):
        for i in range(small_cfg.H):
            a = decode_action(dec, norm, states[b, i], z.data[b]).data
            hand += float(np.sum((a - actions[b, i]) ** 2))
    assert recon == pytest.approx(hand / small_batch.size, rel=1e-5)
    for beta in (0.0, 0.1, 2.0):
        total = float(skill_loss(enc, dec, norm, (states, actions), beta, noise).data)
        assert total == pytest.approx(recon + beta * kl, rel=1e-6)
    assert float(skill_loss(enc, dec, norm, (states, actions), 0.0, noise).data) == pytest.approx(recon, rel=1e-6)


def test_skill_loss_zero_with_perfect_reconstruction(small_bundle, small_batch, small_cfg):
    """Constant zero actions are reproduced exactly by a zero decoder."""
    dec = small_bundle["skill_decoder"]
    _zero(dec)
    states, actions = _pair(small_batch)
    loss = skill_loss(small_bundle["skill_encoder"], dec, small_bundle.norm, (states, np.zeros_like(actions)),
                      0.0, _noise(small_batch, small_cfg))
    assert float(loss.data) == 0.0


# -- prior -----------------------------------------------------------------------------


def test_prior_loss_zero_when_matching(small_bundle, small_batch):
    h = encode_state(small_bundle["state_encoder"], small_bundle.norm, small_batch.states[:, 0])
    p = prior_dist(small_bundle["skill_prior"], h)
    assert float(prior_loss(small_bundle["skill_prior"], h, p).data) == pytest.approx(0.0, abs=1e-6)


def test_prior_loss_gradient_reaches_only_prior(small_bundle, small_batch, small_cfg):
    b = small_bundle
    _, q = encode_skill(b["skill_encoder"], b.norm, _pair(small_batch), _noise(small_batch, small_cfg))
    h = encode_state(b["state_encoder"], b.norm, small_batch.states[:, 0])
    b.zero_grad()
    prior_loss(b["skill_prior"], h, q).backward()
    for name in b.modules:
        nonzero = any(g.any() for g in b[name].grads().values())
        assert nonzero == (name == "skill_prior"), name


def test_sample_prior_cases(small_bundle):
    prior = small_bundle["skill_prior"]
    h = np.random.default_rng(0).standard_normal((1, small_bundle.cfg.d_h)).astype(np.float32)
    np.testing.assert_array_equal(sample_prior(prior, h, np.zeros(3)), prior_dist(prior, h).mean.data)
    a = sample_prior(prior, h, np.random.default_rng(4).standard_normal(3))
    b = sample_prior(prior, h, np.random.default_rng(4).standard_normal(3))
    c = sample_prior(prior, h, np.random.default_rng(5).standard_normal(3))
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


# -- latent modules ----------------------------------------------------------------------


def test_zero_state_encoder_maps_everything_to_origin(small_bundle, small_batch):
    _zero(small_bundle["state_encoder"])
    h = encode_state(small_bundle["state_encoder"], small_bundle.norm, small_batch.states[:, 0]).data
    assert h.shape == (small_batch.size, small_bundle.cfg.d_h) and not h.any()


def test_latent_modules_deterministic_with_correct_shapes(small_bundle, small_batch):
    b = small_bundle
    s = small_batch.states[:, 0]
    h = encode_state(b["state_encoder"], b.norm, s).data
    assert h.tobytes() == encode_state(b["state_encoder"], b.norm, s).data.tobytes()
    z = np.ones((len(s), b.cfg.d_z), np.float32)
    assert decode_state(b["state_decoder"], b.norm, h).shape == (len(s), 4)
    assert flat_step(b["flat_dynamics"], h, z).shape == h.shape
    assert skill_step(b["skill_dynamics"], h, z).shape == h.shape
    assert inverse_infer(b["inverse_dynamics"], h, h).mean.shape == z.shape
    np.testing.assert_array_equal(compose_flat(b["flat_dynamics"], h, z, 0).data, h)
    two = flat_step(b["flat_dynamics"], flat_step(b["flat_dynamics"], h, z), z).data
    np.testing.assert_array_equal(compose_flat(b["flat_dynamics"], h, z, 2).data, two)


def test_zero_dynamics_output_bias_only(small_bundle):
    P = small_bundle["flat_dynamics"]
    for n, t in P.tensors.items():
        if n.endswith(".w"):
            t.data[...] = 0
    h = np.random.default_rng(1).standard_normal((3, small_bundle.cfg.d_h)).astype(np.float32)
    out = flat_step(P, h, np.ones((3, small_bundle.cfg.d_z), np.float32)).data
    last_b = P.names()[-1]
    np.testing.assert_array_equal(out, np.tile(P[last_b].data, (3, 1)))


def test_model_loss_recomposes_and_matches_hand_terms(small_bundle, small_batch, small_cfg):
    b = small_bundle
    states, actions = _pair(small_batch)
    z, q = encode_skill(b["skill_encoder"], b.norm, (states, actions), _noise(small_batch, small_cfg))
    terms = model_loss_terms(b, states, z, q)
    total = float(model_loss(b, states, z, q).data)
    assert total == pytest.approx(sum(float(t.data) for t in terms.values()), rel=1e-6)

    # independent per-row computation of each component
    E, Eb, D = b["state_encoder"], b["target_encoder"], b["state_decoder"]
    H, B = small_cfg.H, small_batch.size
    recon = flat = ss = inv = 0.0
    for r in range(B):
        h = encode_state(E, b.norm, states[r]).data
        hb = encode_state(Eb, b.norm, states[r]).data
        zr = z.data[r:r + 1]
        for k in range(H):
            recon += np.sum((decode_state(D, b.norm, h[k:k + 1]).data - states[r, k]) ** 2)
            flat += np.sum((flat_step(b["flat_dynamics"], h[k:k + 1], zr).data - hb[k + 1]) ** 2)
        ss += np.sum((skill_step(b["skill_dynamics"], h[:1], zr).data - hb[H]) ** 2)
        qr = DiagGaussian(Tensor(q.mean.data[r:r + 1]), Tensor(q.log_std.data[r:r + 1]))
        inv += float(gaussian_kl(qr, inverse_infer(b["inverse_dynamics"], h[:1], h[H:H + 1])).data.sum())
    for key, val in (("recon", recon), ("flat", flat), ("skill_step", ss), ("inverse", inv)):
        assert float(terms[key].data) == pytest.approx(val / B, rel=1e-4), key


def test_model_loss_targets_equal_online_latents_after_full_copy(small_bundle, small_batch, small_cfg):
    b = small_bundle
    for t in b["state_encoder"].tensors.values():
        t.data += 0.1
    align_targets(b, rate=1.0)
    for n in b["state_encoder"].names():
        np.testing.assert_array_equal(b["target_encoder"][n].data, b["state_encoder"][n].data)
    states, actions = _pair(small_batch)
    z, q = encode_skill(b["skill_encoder"], b.norm, (states, actions), _noise(small_batch, small_cfg))
    h = encode_state(b["state_encoder"], b.norm, states[:, small_cfg.H]).data
    pred = skill_step(b["skill_dynamics"], encode_state(b["state_encoder"], b.norm, states[:, 0]).data, z.data).data
    expected = np.sum((pred - h) ** 2) / small_batch.size
    assert float(model_loss_terms(b, states, z, q)["skill_step"].data) == pytest.approx(expected, rel=1e-5)


def test_model_loss_fixed_point_is_zero(small_bundle, small_cfg):
    """A zero encoder, bias-free decoder fitted to a zero state and a zero-input
    inverse model matching the posterior make every term vanish."""
    b = small_bundle
    for name in ("state_encoder", "target_encoder", "state_decoder", "flat_dynamics", "skill_dynamics",
                 "inverse_dynamics"):
        _zero(b[name])
    # the normaliser maps raw states to [-1, 1]; pick the raw state that normalises to 0
    s0 = b.norm.denorm_state(Tensor(np.zeros((1, 4), np.float32))).data[0]
    states = np.tile(s0, (2, small_cfg.H + 1, 1)).astype(np.float32)
    q = DiagGaussian(Tensor(np.zeros((2, small_cfg.d_z), np.float32)),
                     Tensor(np.zeros((2, small_cfg.d_z), np.float32)))
    terms = model_loss_terms(b, states, q.mean, q)
    for k, v in terms.items():
        assert float(v.data) == pytest.approx(0.0, abs=1e-10), k


def test_inverse_term_does_not_reach_encoders(small_bundle, small_batch, small_cfg):
    b = small_bundle
    states, actions = _pair(small_batch)
    z, q = encode_skill(b["skill_encoder"], b.norm, (states, actions), _noise(small_batch, small_cfg))
    b.zero_grad()
    model_loss_terms(b, states, z, q)["inverse"].backward()
    for name in ("state_encoder", "skill_encoder", "target_encoder"):
        assert not any(g.any() for g in b[name].grads().values()), name
    assert any(g.any() for g in b["inverse_dynamics"].grads().values())


def test_target_encoder_never_receives_gradient(small_bundle, small_batch, small_cfg):
    b = small_bundle
    states, actions = _pair(small_batch)
    z, q = encode_skill(b["skill_encoder"], b.norm, (states, actions), _noise(small_batch, small_cfg))
    b.zero_grad()
    model_loss(b, states, z, q).backward()
    assert not any(g.any() for g in b["target_encoder"].grads().values())
    assert any(g.any() for g in b["state_encoder"].grads().values())


def test_chained_skill_steps_stay_finite(small_bundle):
    b = small_bundle
    h = encode_state(b["state_encoder"], b.norm, np.array([[1.5, 1.5, 0, 0]], np.float32)).data
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = skill_step(b["skill_dynamics"], h, rng.standard_normal((1, b.cfg.d_z))).data
    assert np.isfinite(h).all()


@pytest.mark.parametrize("loss", ["skill", "prior", "model", "model_encoders", "sg", "adapt"])
def test_gradients_match_central_differences(small_bundle, small_batch, small_cfg, loss):
    from oracles import double_bundle_for_checks

    b = double_bundle_for_checks(small_bundle)
    fn, modules = loss_closures(small_cfg, small_batch)[loss]
    err, n = central_difference_check(b, fn, modules, step=1e-5)
    assert n > 0 and err < 1e-4
