import numpy as np
import pytest

from glvsa.config import TrainConfig
from glvsa.dataset import generate_expert_dataset, make_shift, sample_batch
from glvsa.maze import default_maze
from glvsa.model import ModelBundle

SMALL = dict(H=4, d_z=3, d_h=5, hidden=16, hidden_layers=2, batch_size=8, n_expert=30, epochs=2,
             batches_per_epoch=3, iterations=2, branches=4, skills_per_rollout=2, eval_episodes=4,
             n_shots=2, adapt_steps=3, adapt_batch=8)


@pytest.fixture(scope="session")
def spec():
    return default_maze()


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(**SMALL)


@pytest.fixture(scope="session")
def small_store(spec, small_cfg):
    return generate_expert_dataset(spec, make_shift(spec, "none"), small_cfg.n_expert, seed=0, horizon=small_cfg.H)


@pytest.fixture
def small_bundle(spec, small_cfg):
    return ModelBundle(small_cfg, spec, seed=0)


@pytest.fixture
def small_batch(small_store, small_cfg):
    return sample_batch(small_store, small_cfg.H, small_cfg.batch_size, np.random.default_rng(0))
