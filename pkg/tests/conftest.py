"""Shared fixtures: micro configuration, seeded generators, image folders."""

import logging

import numpy as np
import pytest

import tensor_engine
from image_io import save_image
from models import ModelConfig, build_model
from normalization import NormConfig
from synth_dataset import synth_image
from training import TrainConfig


@pytest.fixture(autouse=True)
def engine_defaults():
    tensor_engine.set_conv_impl("im2col")
    tensor_engine.set_debug_checks(False)
    yield
    tensor_engine.set_conv_impl("im2col")
    tensor_engine.set_debug_checks(False)


@pytest.fixture(autouse=True)
def quiet_logging():
    logging.getLogger().setLevel(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with tensor_engine.precision(np.float64):
        yield


@pytest.fixture
def micro_cfg():
    return ModelConfig(latent_dim=16, hidden_dims=(4, 8), patch_size=8, image_size=16)


@pytest.fixture
def micro_model(micro_cfg):
    return build_model(micro_cfg, NormConfig(), seed=0)


@pytest.fixture
def micro_train_cfg():
    return TrainConfig(lr=1e-3, batch_images=2, patches_per_image=4, epochs=1, seed=0)


def write_images(directory, count, size=32, seed=0, prefix="img"):
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        path = directory / f"{prefix}_{i:03d}.png"
        save_image(synth_image(np.random.default_rng([seed, i]), size), path)
        paths.append(path)
    return paths


@pytest.fixture
def image_dir(tmp_path):
    directory = tmp_path / "clean"
    write_images(directory, 6)
    return directory
