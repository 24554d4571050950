import numpy as np
import pytest

from magesim import ModelConfig, build_model


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(num_layers=3, num_query_heads=4, num_kv_heads=2, head_dim=8,
                       vocab_size=32, block_size=4, seed=7)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config)


def random_distributions(rng, shape):
    """Random probability rows over the last axis."""
    x = rng.random(shape).astype(np.float32) + 1e-3
    return x / x.sum(axis=-1, keepdims=True)
