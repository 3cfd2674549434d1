# %% [markdown]
# # The maze and the expert data
#
# A point mass moves through an 8x8 grid maze. Its state is (x, y, vx, vy)
# and actions are bounded accelerations. Goals are split into a train region
# and, per shift level, an eval region.

# %%
import numpy as np

from glvsa import default_maze, generate_expert_dataset, goal_coverage, make_shift, sample_batch

spec = default_maze()
print("\n".join(spec.to_rows()))
print(len(spec.free_cells()), "free cells")

# %% [markdown]
# Each shift level keeps the same train region and moves the eval region
# further away. The Large level shares no cell with training.

# %%
for level in ("none", "small", "medium", "large"):
    sh = make_shift(spec, level)
    print(f"{level:>6}: {len(sh.eval_cells)} eval cells, overlap with train {sh.overlap():.2f}")

# %% [markdown]
# Expert trajectories follow a grid shortest path to a train-region goal.

# %%
store = generate_expert_dataset(spec, make_shift(spec, "none"), n=50, seed=0, horizon=10)
lengths = [len(t) for t in store.trajectories]
print("trajectories:", len(store), "length range:", min(lengths), max(lengths))
print("goal coverage (0.25 bins):", goal_coverage(store))

# %%
batch = sample_batch(store, H=10, batch_size=4, rng=np.random.default_rng(0))
print("states", batch.states.shape, "actions", batch.actions.shape, "goals", batch.goals.shape)
