from __future__ import annotations

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # make `oracles` importable

from focusinfer import ModelConfig, init_random


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(
        num_layers=4, num_heads=2, head_dim=8, mlp_dim=32,
        vocab_size=64, mask_token_id=63, max_positions=1024, seed=7,
    )


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_random(small_config)


@pytest.fixture(scope="session")
def toy_weights():
    # package defaults: 8 layers, 4 heads, head_dim 16, vocab 512
    return init_random(ModelConfig(seed=0))


def make_prompt(n: int, vocab: int, mask_id: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, n])
    ids = rng.integers(0, vocab - 1, size=n, dtype=np.int64)
    ids[ids >= mask_id] += 1
    return ids
