import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import axvit as ax
from axvit import data as dt


@pytest.fixture(scope="session")
def catalog():
    return ax.builtin_catalog()


@pytest.fixture(scope="session")
def toy_data():
    """Shared synthetic dataset: (patches [1600, 16, 16], labels [1600])."""
    imgs, labels = dt.synthetic_dataset(1600, seed=7)
    return dt.images_to_patches(imgs), labels


@pytest.fixture(scope="session")
def small_calibrated_model(toy_data):
    """Untrained but calibrated 2-layer model for structural tests."""
    patches, _ = toy_data
    model = ax.init_model(ax.ModelConfig(num_layers=2, embed_dim=16,
                                         num_heads=2, ffn_dim=32), seed=3)
    ax.calibrate(model, patches[:128])
    return model
