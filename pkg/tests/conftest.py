"""Shared fixtures: tiny synthetic scenes and minutes-scale train configs."""

import numpy as np
import pytest

from rose.losses import LossConfig
from rose.scene import generate_synthetic, make_spec
from rose.train import TrainConfig


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    """A 16x16, 6-view constant-transition scene (seconds to train on)."""
    out = tmp_path_factory.mktemp("tiny_scene")
    generate_synthetic(make_spec("constant02", resolution=16, n_views=6, seed=11), out)
    return out


@pytest.fixture()
def tiny_scene(tiny_scene_dir):
    from rose.scene import load_dataset

    return load_dataset(tiny_scene_dir)


def tiny_train_config(**kw):
    base = dict(
        batch_rays=64,
        n_iters=30,
        n_coarse=8,
        n_fine=8,
        width=16,
        depth=2,
        skip=0,
        n_freq_pos=3,
        n_freq_dir=2,
        lrd_k=4,
        lrd_m=6,
        cosine_period=30,
        seed=0,
        loss=LossConfig(tone_curve_enabled=False, lambda_ic=0.02),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture()
def tiny_cfg():
    return tiny_train_config()
