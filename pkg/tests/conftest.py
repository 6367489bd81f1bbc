from pathlib import Path

import numpy as np
import pytest

from marsrec.dataset import InteractionDataset

REPO = Path(__file__).resolve().parents[1]
ML100K = REPO / "data" / "ml-100k.tsv"


def random_dataset(n_users, n_items, density, seed=0, min_per_user=1):
    rng = np.random.default_rng(seed)
    mask = rng.random((n_users, n_items)) < density
    for u in range(n_users):
        if mask[u].sum() < min_per_user:
            mask[u, rng.choice(n_items, min_per_user, replace=False)] = True
    users, items = np.nonzero(mask)
    return InteractionDataset(n_users, n_items, users, items)


@pytest.fixture
def small_ds():
    return random_dataset(7, 11, 0.35, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
