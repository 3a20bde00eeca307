"""Shared fixtures: tiny specs, small procedural datasets, a cached teacher."""

import pytest
import torch

from scdd.data import generate_synthetic_dataset
from scdd.netcore import NetworkSpec
from scdd.squeeze import PretrainConfig, ProbeConfig, linear_probe, pretrain_supervised

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_spec():
    return NetworkSpec("tiny_resnet", depth=8, num_classes=4, input_shape=(3, 16, 16))


@pytest.fixture(scope="session")
def tiny_train():
    return generate_synthetic_dataset(num_classes=4, per_class=25, image_hw=16,
                                      seed=0, split="train")


@pytest.fixture(scope="session")
def tiny_val():
    return generate_synthetic_dataset(num_classes=4, per_class=10, image_hw=16,
                                      seed=0, split="val")


@pytest.fixture(scope="session")
def micro_model(tiny_spec, tiny_train):
    """A briefly supervised-trained model (head aligned, BN stats populated)."""
    cfg = PretrainConfig("supervised", epochs=10, batch_size=32, seed=0)
    return pretrain_supervised(tiny_train, tiny_spec, cfg)


@pytest.fixture(scope="session")
def micro_teacher(micro_model, tiny_train):
    """The micro model after a linear probe; usable as recovery teacher."""
    return linear_probe(micro_model, tiny_train, ProbeConfig(epochs=25, seed=0))
