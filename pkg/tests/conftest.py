"""Shared fixtures: small synthetic datasets and overfit training artifacts.

The overfit runs are the expensive part of the suite, so they are session
scoped and shared between the unit tests and the acceptance suite.
"""

import numpy as np
import pytest
import torch

from defectdiff import autoencoder as ae
from defectdiff import datasets
from defectdiff.autoencoder import AutoencoderTrainConfig
from defectdiff.diffusion import Generator, GeneratorConfig, GeneratorTrainConfig, train_generator

torch.set_num_threads(2)

OVERFIT_RESOLUTION = 64


@pytest.fixture(scope="session")
def overfit_pairs():
    """16 synthetic pairs cycling through the three categories."""
    pairs = [
        datasets.synth_pair(i, datasets.CATEGORIES[i % 3], OVERFIT_RESOLUTION)
        for i in range(16)
    ]
    return datasets.PairSet(pairs, OVERFIT_RESOLUTION)


@pytest.fixture(scope="session")
def overfit_autoencoder(overfit_pairs):
    params = ae.train_autoencoder(
        overfit_pairs, train=AutoencoderTrainConfig(steps=2000, lr=2e-3, batch_size=8, seed=0)
    )
    return params, overfit_pairs


@pytest.fixture(scope="session")
def overfit_generator(overfit_autoencoder):
    """Generator overfit on the 16 pairs; <= 2000 training steps."""
    ae_params, pairs = overfit_autoencoder
    config = GeneratorConfig()
    generator = Generator(config, ae_params, seed=0)
    history = train_generator(
        pairs,
        generator,
        GeneratorTrainConfig(iterations=2000, warmup=200, lr=2e-3, batch_size=8, seed=0),
    )
    generator.eval()
    return generator, history, pairs


def fresh_generator(ae_params, seed=0, **overrides):
    config = GeneratorConfig(**overrides)
    gen = Generator(config, ae_params, seed=seed)
    gen.eval()
    return gen


@pytest.fixture()
def untrained_generator(overfit_autoencoder):
    ae_params, _ = overfit_autoencoder
    return fresh_generator(ae_params)
