"""Shared fixtures: a small, cheaply trained model stack reused across tests.

These are deliberately undersized (few epochs, few images) so the unit suite
stays fast; full-scale runs live in the acceptance tests.
"""

import pytest

from dfbench.encoders import EncoderConfig, train_encoder
from dfbench.generator import GeneratorConfig, train_generator
from dfbench.world import WorldConfig, build_split


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def quick_gen(world):
    real_split = build_split(world, 400, None, seed=11)
    return train_generator(real_split, GeneratorConfig(epochs=2), seed=3)


@pytest.fixture(scope="session")
def quick_split(world, quick_gen):
    return build_split(world, 400, quick_gen, seed=12)


@pytest.fixture(scope="session")
def tiny_encoder(world):
    cfg = EncoderConfig(tier="small", base_channels=4, n_train=200, epochs=3)
    return train_encoder(world, config=cfg, seed=9)
