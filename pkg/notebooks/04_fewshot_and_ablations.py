# %% [markdown]
# # Few-shot adaptation and ablations
#
# Adaptation only moves the goal generator (and the critic that scores it).
# Every other module stays frozen, which the check at the end confirms.

# %%
import numpy as np

from glvsa import TrainConfig, eval_zeroshot, finetune_fewshot, run_ablation, train_offline
from glvsa.ablation import format_table
from glvsa.trainer import shift_for

cfg = TrainConfig(iterations=1, epochs=3, batches_per_epoch=20, n_expert=100, eval_episodes=0)
bundle = train_offline(cfg).bundle
large = shift_for(cfg, bundle.spec, "large")

# %%
ft = finetune_fewshot(bundle, large, n_shots=3, seed=0, steps_per_episode=10)
print("per-shot success:", ft.shot_success)
print("zero-shot:", eval_zeroshot(bundle, large, 10, cfg.eval_seed))
print("3-shot:   ", eval_zeroshot(ft.bundle, large, 10, cfg.eval_seed))

# %%
moved = [name for name in bundle.modules
         if any(not np.array_equal(a.data, b.data)
                for (_, a), (_, b) in zip(bundle.modules[name].items(), ft.bundle.modules[name].items()))]
print("modules changed by adaptation:", moved)

# %% [markdown]
# An ablation trains the full model and one variant on the same expert data.

# %%
rows = run_ablation(cfg, "no-skill-step-dynamics", episodes=5, levels=("none", "large"))
print(format_table(rows))
