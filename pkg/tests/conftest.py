import os

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import HealthCheck, settings

from rsgan.data import split_folds
from rsgan.hetgraph import SeededFriendSet, discover_seeded_friends
from rsgan.synthetic import planted_friends
from rsgan.trainer import TrainConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Schedule that trains the 20-user planted fixture in a few seconds.
PLANTED_TRAIN = dict(batch_size=16, d=10, hidden=50, max_epochs=60, patience=100, lr_decay=1.0,
                     lr_g=0.3, warmup_epochs=20, pretrain_epochs=100)
PLANTED_K_SEED = 3
PLANTED_VALIDATION = 0.2


def planted_setup(master_seed=0):
    """Planted fixture, its first fold and its seeded friends."""
    fx = planted_friends(master_seed=master_seed)
    fold = split_folds(fx.dataset, 5, master_seed, validation_fraction=PLANTED_VALIDATION)[0]
    seeds = discover_seeded_friends(fold.matrix("train"), fx.social, k_seed=PLANTED_K_SEED,
                                    master_seed=master_seed)
    return fx, fold, seeds


def planted_config(master_seed=0, **overrides):
    kw = dict(PLANTED_TRAIN, master_seed=master_seed)
    kw.update(overrides)
    return TrainConfig(**kw)


def random_instance(rng, m=5, n=6, density=0.4):
    """Random interaction and seed matrices where every user has an unconsumed item."""
    R = (rng.random((m, n)) < density).astype(float)
    R[:, rng.integers(n)] = 0.0
    S = (rng.random((m, m)) < 0.5).astype(float)
    np.fill_diagonal(S, 0.0)
    return sp.csr_matrix(R), sp.csr_matrix(S)


def seeds_from_matrix(S) -> SeededFriendSet:
    S = sp.csr_matrix(S)
    return SeededFriendSet.from_pairs(S.shape[0], np.stack(S.nonzero(), axis=1))


@pytest.fixture(scope="session")
def planted():
    return planted_setup(0)
