"""Shared fixtures: one small rendered dataset and one trained teacher per session."""

import numpy as np
import pytest
import torch

from scenelm.dataset import generate_dataset
from scenelm.teacher import TeacherConfig, teacher_corpus, train_teacher

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    """12 scenes x 8 views at 64x64 plus per-scene BEV targets."""
    return generate_dataset(seed=0, num_scenes=12, num_views=8, resolution=64, bev_resolution=64)


@pytest.fixture(scope="session")
def trained_teacher(tiny_dataset):
    return train_teacher(teacher_corpus(tiny_dataset), TeacherConfig(epochs=80, seed=0))
