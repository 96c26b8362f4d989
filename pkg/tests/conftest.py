import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tripletkit.losses import BatchLabels  # noqa: E402


def random_pk_batch(rng, p_max=4, k_max=4, d_max=8, spread=1.0):
    """Random PK batch with distinct rows: (embeddings, labels)."""
    p = int(rng.integers(2, p_max + 1))
    k = int(rng.integers(2, k_max + 1))
    d = int(rng.integers(2, d_max + 1))
    x = spread * rng.standard_normal((p * k, d))
    ids = np.repeat(np.arange(p), k)
    return x, BatchLabels(ids, p, k)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
