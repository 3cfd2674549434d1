# %% [markdown]
# # Offline training and zero-shot evaluation
#
# A short run: two iterations of joint training of the skill VAE, the latent
# world model and the goal-conditioned policy, then rollouts that add
# synthetic trajectories. The desk defaults (three iterations of 40 epochs)
# take a little over a minute; this cut-down run takes a few seconds.

# %%
import tempfile
from pathlib import Path

from glvsa import TrainConfig, eval_all_shifts, load_checkpoint, train_offline

cfg = TrainConfig(iterations=2, epochs=3, batches_per_epoch=20, n_expert=100, eval_episodes=0)
out = Path(tempfile.mkdtemp())
res = train_offline(cfg, out_dir=out)

# %%
last = res.metrics[-1]
print("last epoch total loss:", round(last.loss_total, 3))
print("coverage per iteration:", res.coverage)
print(sorted(p.name for p in out.iterdir()))

# %% [markdown]
# Scores are percentages: 100 at the goal, falling linearly to 0 at ten
# units away. Every shift is evaluated with the same agent and no updates.

# %%
bundle = load_checkpoint(out / "iter2.ckpt")
for report in eval_all_shifts(bundle, episodes=10).values():
    print(report)
