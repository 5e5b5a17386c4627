"""Shared fixtures: small float64 sequencers and tiny synthetic datasets"""

import numpy as np
import pytest

from edrs.dataset import PatchDataset, augment, generate_synthetic, split_folds
from edrs.engine import build_dense_net
from edrs.harness import CrossValidationData
from edrs.models import AugmentConfig, EvolutionRunConfig, SequencerArchitecture, TrainConfig
from edrs.seeding import make_rng

TINY_ARCH = SequencerArchitecture(conv_filters=(4, 4, 8), fc_hidden=8)
COARSE_AUGMENT = AugmentConfig(malignant_step_deg=90, benign_step_deg=90)


def small_net(seed=0, input_shape=(1, 8, 8), filters=(2, 3), fc_dims=(4, 2), precision="float64"):
    """3x3 conv stack with pooling, sized for finite-difference checks"""
    specs = [(f, (3, 3), True) for f in filters]
    net = build_dense_net(input_shape, specs, fc_dims, make_rng(seed), precision=precision)
    rng = make_rng(seed + 1000)
    for layer in net.conv_layers:
        layer.biases = rng.normal(0.0, 0.1, layer.biases.shape)
    for layer in net.fc_layers:
        layer.biases = rng.normal(0.0, 0.1, layer.biases.shape)
    return net


@pytest.fixture
def net_factory():
    return small_net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_records():
    return generate_synthetic(n_patients=12, lesions_per_patient=1, seed=3)


@pytest.fixture(scope="session")
def tiny_cv(tiny_records):
    records = augment(tiny_records, COARSE_AUGMENT)
    split = split_folds(records, n_folds=3, seed=0)
    return CrossValidationData(PatchDataset.from_records(records), split)


@pytest.fixture
def fast_run_cfg():
    return EvolutionRunConfig(
        n_generations=3,
        retain_fraction=0.8,
        n_folds=3,
        train_cfg=TrainConfig(epochs=1, batch_size=16, learning_rate=0.01),
        master_seed=11,
        benchmark=False,
        architecture=TINY_ARCH,
    )
