import numpy as np
import pytest

from glvsa.autodiff import Tensor
from glvsa.dataset import make_shift
from glvsa.latent import encode_state, inverse_infer
from glvsa.maze import EnvConfig
from glvsa.policy import (ContractViolation, HierarchicalAgent, Transition, act, adapt_loss, adapt_loss_terms,
                          check_freeze, critic_targets, critic_update, finetune_fewshot, freeze_for_adaptation,
                          generate_goal, hierarchical_controller, high_level_policy, load_replay, policy_dist,
                          q_value, run_episodes, save_replay, sg_loss, sg_loss_terms)


def _zero(params):
    for t in params.tensors.values():
        t.data[...] = 0


def _noise(n, d, seed=0):
    return np.random.default_rng(seed).standard_normal((n, d))


def _grad_modules(bundle):
    return {n for n in bundle.modules if any(g.any() for g in bundle[n].grads().values())}


# -- goal generator and high-level policy ------------------------------------------


def test_zero_goal_generator_outputs_zero(small_bundle):
    f = small_bundle["goal_generator"]
    _zero(f)
    out = generate_goal(f, small_bundle.norm, np.ones((2, small_bundle.cfg.d_h)), [[2.5, 1.5], [6.5, 6.5]]).data
    assert out.shape == (2, small_bundle.cfg.d_h) and not out.any()


def test_goal_generator_deterministic(small_bundle):
    h = np.random.default_rng(0).standard_normal((3, small_bundle.cfg.d_h)).astype(np.float32)
    g = [[2.5, 1.5]] * 3
    a = generate_goal(small_bundle["goal_generator"], small_bundle.norm, h, g).data
    b = generate_goal(small_bundle["goal_generator"], small_bundle.norm, h, g).data
    assert a.tobytes() == b.tobytes()


def test_high_level_policy_zero_noise_is_inverse_mean(small_bundle):
    b = small_bundle
    s = np.array([1.5, 1.5, 0.0, 0.0], np.float32)
    g = np.array([6.5, 6.5], np.float32)
    z = high_level_policy(b, s, g)
    h = encode_state(b["state_encoder"], b.norm, s[None])
    h_hat = generate_goal(b["goal_generator"], b.norm, h, g)
    np.testing.assert_array_equal(z, inverse_infer(b["inverse_dynamics"], h, h_hat).mean.data[0])
    assert z.shape == (b.cfg.d_z,)
    za = high_level_policy(b, s, g, np.random.default_rng(2).standard_normal(b.cfg.d_z))
    zb = high_level_policy(b, s, g, np.random.default_rng(2).standard_normal(b.cfg.d_z))
    assert za.tobytes() == zb.tobytes()
    many = high_level_policy(b, np.tile(s, (5, 1)), g)
    assert many.shape == (5, b.cfg.d_z)


@pytest.mark.parametrize("H", [1, 3])
def test_act_refreshes_skill_every_h_steps(spec, small_cfg, H):
    from glvsa.model import ModelBundle

    b = ModelBundle(small_cfg.replace(H=H), spec, seed=0)
    agent = HierarchicalAgent(b, np.random.default_rng(0))
    s, g = np.array([1.5, 1.5, 0, 0], np.float32), np.array([6.5, 6.5], np.float32)
    zs = []
    for _ in range(3 * H + 1):
        a = agent(s, g)
        assert np.abs(a).max() <= 1.0
        zs.append(agent.z.copy())
    assert agent.refreshes == list(range(0, 3 * H + 1, H))
    for j in range(3):
        block = zs[j * H:(j + 1) * H]
        assert all(z.tobytes() == block[0].tobytes() for z in block)


def test_act_keeps_current_skill_mid_segment(small_bundle):
    s, g = np.array([1.5, 1.5, 0, 0], np.float32), np.array([6.5, 6.5], np.float32)
    held = np.full(small_bundle.cfg.d_z, 0.3, np.float32)
    _, z = act(small_bundle, s, g, held, 1)
    assert z is held
    _, z = act(small_bundle, s, g, held, small_bundle.H)
    assert z is not held


# -- offline goal loss -----------------------------------------------------------------


def test_sg_loss_recomposes(small_bundle, small_batch, small_cfg):
    noise = _noise(small_batch.size, small_cfg.d_z)
    t = sg_loss_terms(small_bundle, small_batch.states, small_batch.goals, noise)
    total = float(sg_loss(small_bundle, small_batch.states, small_batch.goals, noise).data)
    assert total == pytest.approx(float(t["bc"].data) + float(t["sanity"].data), rel=1e-6)
    # hand version of the cloning term
    b = small_bundle
    h = encode_state(b["state_encoder"], b.norm, small_batch.states[:, 0]).data
    hbar = encode_state(b["target_encoder"], b.norm, small_batch.states[:, small_cfg.H]).data
    hhat = generate_goal(b["goal_generator"], b.norm, h, small_batch.goals).data
    assert float(t["bc"].data) == pytest.approx(np.sum((hbar - hhat) ** 2) / small_batch.size, rel=1e-5)


def test_sg_loss_trains_only_goal_generator(small_bundle, small_batch, small_cfg):
    small_bundle.zero_grad()
    sg_loss(small_bundle, small_batch.states, small_batch.goals, _noise(small_batch.size, small_cfg.d_z)).backward()
    assert _grad_modules(small_bundle) == {"goal_generator"}


def test_sanity_term_zero_at_fixed_point(small_bundle, small_batch, small_cfg):
    """f returns zero, the inverse model returns zero skills, and the skill-step
    model maps (h, 0) to 0: the generated goal is its own reachable image."""
    b = small_bundle
    for name in ("goal_generator", "inverse_dynamics", "skill_dynamics"):
        _zero(b[name])
    noise = np.zeros((small_batch.size, small_cfg.d_z))
    t = sg_loss_terms(b, small_batch.states, small_batch.goals, noise)
    assert float(t["sanity"].data) == 0.0
    # and the whole loss vanishes once the targets are zero as well
    _zero(b["target_encoder"])
    t = sg_loss_terms(b, small_batch.states, small_batch.goals, noise)
    assert float(t["bc"].data) == 0.0 and float(t["sanity"].data) == 0.0


# -- adaptation objective ----------------------------------------------------------------


def test_adapt_loss_requires_freeze(small_bundle, small_batch, small_cfg):
    s, g = small_batch.states[:, 0], small_batch.goals
    noise = _noise(len(s), small_cfg.d_z)
    with pytest.raises(ContractViolation):
        adapt_loss(small_bundle, s, g, noise, 0.1)
    small_bundle.frozen.discard("state_encoder")
    freeze_for_adaptation(small_bundle)
    check_freeze(small_bundle)
    small_bundle.frozen.discard("skill_prior")
    with pytest.raises(ContractViolation):
        check_freeze(small_bundle)


def test_adapt_loss_gradients_only_on_goal_generator(small_bundle, small_batch, small_cfg):
    b = small_bundle
    freeze_for_adaptation(b)
    last = b["critic"].names()[-2]
    b["critic"][last].data[...] = 0.5  # nonzero value surface
    b.zero_grad()
    adapt_loss(b, small_batch.states[:, 0], small_batch.goals, _noise(small_batch.size, small_cfg.d_z),
               0.1, 1.0).backward()
    assert _grad_modules(b) == {"goal_generator"}


def test_adapt_loss_recomposes(small_bundle, small_batch, small_cfg):
    b = small_bundle
    freeze_for_adaptation(b)
    b["critic"][b["critic"].names()[-2]].data[...] = 0.5
    s, g = small_batch.states[:, 0], small_batch.goals
    noise = _noise(len(s), small_cfg.d_z)
    t = {k: float(v.data) for k, v in adapt_loss_terms(b, s, g, noise).items()}
    for alpha, w in ((0.0, 0.0), (0.1, 1.0), (2.0, 0.5)):
        expected = t["value"] + alpha * t["prior_kl"] + w * t["consistency"]
        assert float(adapt_loss(b, s, g, noise, alpha, w).data) == pytest.approx(expected, rel=1e-6, abs=1e-7)
    assert float(adapt_loss(b, s, g, noise, 0.0, 0.0).data) == pytest.approx(t["value"], rel=1e-6)


# -- critic -----------------------------------------------------------------------------


def _critic_batch(b, n=4, r=0.0, done=0.0, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "h": rng.standard_normal((n, b.cfg.d_h)).astype(np.float32),
        "z": rng.standard_normal((n, b.cfg.d_z)).astype(np.float32),
        "r": np.full(n, r, np.float32),
        "h_next": rng.standard_normal((n, b.cfg.d_h)).astype(np.float32),
        "done": np.full(n, done, np.float32),
        "g": np.tile(np.array([2.5, 1.5], np.float32), (n, 1)),
    }


def test_critic_target_zero_when_rewards_and_target_vanish(small_bundle):
    b = small_bundle
    batch = _critic_batch(b)
    y = critic_targets(b, batch["r"], batch["h_next"], batch["done"], batch["g"], 0.9)
    assert not y.any()  # the target critic starts at zero output


def test_critic_target_drops_bootstrap_when_done(small_bundle):
    b = small_bundle
    b["critic_target"][b["critic_target"].names()[-1]].data[...] = 7.0  # Q_target == 7 everywhere
    batch = _critic_batch(b, r=1.0, done=1.0)
    y = critic_targets(b, batch["r"], batch["h_next"], batch["done"], batch["g"], 0.9)
    np.testing.assert_allclose(y, 1.0)


def test_critic_td_target_scalar_oracle(small_bundle):
    b = small_bundle
    ct = b["critic_target"]
    rng = np.random.default_rng(3)
    for t in ct.tensors.values():
        t.data[...] = rng.normal(0, 0.5, t.shape)
    batch = _critic_batch(b, n=1, r=2.0)
    h_next = batch["h_next"]
    z_next = policy_dist(b, Tensor(h_next), batch["g"])[0].mean.data
    q_next = float(q_value(ct, h_next, z_next).data[0])
    gamma_H = 0.99 ** b.cfg.H
    y = critic_targets(b, batch["r"], h_next, batch["done"], batch["g"], gamma_H)
    assert y[0] == pytest.approx(2.0 + gamma_H * q_next, rel=1e-6)


def test_critic_update_moves_only_critic_and_target(small_bundle):
    b = small_bundle
    before = b.state_dict()
    loss = critic_update(b, _critic_batch(b, r=1.0), 0.9, 1e-2)
    assert loss == pytest.approx(1.0)  # Q == 0 against target 1
    after = b.state_dict()
    changed = {k.split("/")[0] for k in before if before[k].tobytes() != after[k].tobytes()}
    assert changed == {"critic", "critic_target"}


# -- episodes and few-shot ---------------------------------------------------------------


def test_run_episodes_scripted_oracle_succeeds(spec):
    goals = np.array([[1.5, 2.5], [2.5, 1.5]], np.float32)

    def control(states, g, t):
        return np.clip((g - states[:, :2]) * 2.0 - states[:, 2:], -1, 1)

    out = run_episodes(spec, control, np.array([[1.5, 1.5], [1.5, 1.5]]), goals, 50)
    assert out["success"].all() and (out["lengths"] < 50).all()


def test_hierarchical_controller_matches_agent(small_bundle):
    s = np.array([[1.5, 1.5, 0, 0]], np.float32)
    g = np.array([[6.5, 6.5]], np.float32)
    ctl = hierarchical_controller(small_bundle)
    agent = HierarchicalAgent(small_bundle)
    np.testing.assert_allclose(ctl(s, g, 0)[0], agent(s[0], g[0]), rtol=1e-6)


def test_finetune_zero_shots_leaves_bundle_unchanged(small_bundle):
    shift = make_shift(small_bundle.spec, "large")
    before = small_bundle.state_dict()
    res = finetune_fewshot(small_bundle, shift, 0, seed=0)
    after = res.bundle.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert res.shot_success == [] and res.replay == []


def test_finetune_freeze_contract(small_bundle):
    shift = make_shift(small_bundle.spec, "large")
    before = small_bundle.state_dict()
    res = finetune_fewshot(small_bundle, shift, 2, seed=1, env_cfg=EnvConfig(horizon=30))
    after = res.bundle.state_dict()
    changed = {k.split("/")[0] for k in before if before[k].tobytes() != after[k].tobytes()}
    assert changed and changed <= {"goal_generator", "critic", "critic_target"}
    assert "goal_generator" in changed
    # the source bundle is untouched
    assert all(before[k].tobytes() == v.tobytes() for k, v in small_bundle.tensors())
    assert len(res.shot_success) == 2 and res.replay
    assert len(res.critic_losses) == len(res.adapt_losses) == 2 * small_bundle.cfg.adapt_steps


def test_finetune_deterministic(small_bundle):
    shift = make_shift(small_bundle.spec, "large")
    a = finetune_fewshot(small_bundle, shift, 1, seed=5, env_cfg=EnvConfig(horizon=20)).bundle.state_dict()
    b = finetune_fewshot(small_bundle, shift, 1, seed=5, env_cfg=EnvConfig(horizon=20)).bundle.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_replay_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ts = [Transition(rng.standard_normal(4).astype(np.float32), rng.standard_normal(3).astype(np.float32),
                     float(i), rng.standard_normal(4).astype(np.float32), float(i % 2),
                     rng.standard_normal(2).astype(np.float32)) for i in range(5)]
    path = tmp_path / "r.replay"
    save_replay(ts, path)
    back = load_replay(path)
    assert len(back) == 5
    for a, b in zip(ts, back):
        for f in ("s", "z", "s_next", "g"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
        assert (a.r, a.done) == (b.r, b.done)
    save_replay([], tmp_path / "empty.replay")
    assert load_replay(tmp_path / "empty.replay") == []
