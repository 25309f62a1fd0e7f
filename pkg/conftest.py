"""
Shared fixtures: a 16x16 micro model and a tiny synthetic split
"""

import numpy as np
import pytest

from config import settings_from_mapping
from model import LesionSegModel
from synthdata import generate_dataset

MICRO = {
    "image_size": 16, "patch_size": 4, "embed_dim": 8, "vision_depth": 1, "text_depth": 1,
    "encoder_heads": 2, "text_length": 8, "n_learnable_tokens": 2, "tpca_heads": 2,
    "epochs": 2, "batch_size": 2, "eval_every": 1, "learning_rate": 1e-3,
    "texture_scale": 4, "min_radius": 2, "max_radius": 4, "min_area": 4, "max_area": 120,
    "train_normal": 3, "train_abnormal": 3, "test_normal": 2, "test_abnormal": 2,
}


@pytest.fixture
def micro_settings(tmp_path):
    return settings_from_mapping({**MICRO, "output_dir": str(tmp_path / "run")})


@pytest.fixture
def micro_dataset(micro_settings):
    return generate_dataset(micro_settings.dataset_spec())


@pytest.fixture
def micro_model(micro_settings):
    return LesionSegModel(micro_settings.train)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
