# %% [markdown]
# # Imagined trajectories
#
# From a dataset state the world model rolls K skills forward in latent
# space. Each skill covers H steps. The rollout is decoded back into states
# and inverse-dynamics actions and stored as a synthetic trajectory.

# %%
import numpy as np

from glvsa import ModelBundle, RolloutConfig, TrainConfig, default_maze, latent_rollout, run_iteration_rollouts
from glvsa.rollout import decode_trajectory
from glvsa.trainer import build_expert_store

cfg = TrainConfig(n_expert=60)
store = build_expert_store(cfg)
bundle = ModelBundle(cfg, default_maze(), seed=0)

# %%
ro = latent_rollout(bundle, store.trajectories[0].states[0], K=3, rng=np.random.default_rng(0))
print("latent states:", ro.h.shape, "skills:", ro.z.shape, "transitions:", ro.n_transitions)
traj, clamped = decode_trajectory(bundle, ro)
print("decoded:", traj.states.shape, traj.actions.shape, "clamped states:", clamped)

# %% [markdown]
# One rollout pass over the store. An untrained model produces little that
# is useful, but the bookkeeping is the same as during training.

# %%
stats = run_iteration_rollouts(bundle, store, RolloutConfig(branches=8, skills=3, seed=0), iteration=1)
print(f"appended {stats.appended}, rejected {stats.rejected}, "
      f"coverage {stats.coverage_before} -> {stats.coverage_after}")
