import numpy as np
import pytest

from owpt.config import ExperimentConfig, ModelConfig, TrainControls
from owpt.data import DatasetSpec, generate
from owpt.model import FrozenEncoder, Temperature


@pytest.fixture(scope="session")
def enc():
    """Small fully random encoder for contract-level tests."""
    return FrozenEncoder.random(n_classes=8, token_dim=6, embed_dim=10, feature_dim=5, seed=11)


@pytest.fixture(scope="session")
def temp():
    return Temperature(0.05)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(DatasetSpec(n_classes=6, feature_dim=5, shots_per_class=4, test_per_class=6, seed=7))


@pytest.fixture(scope="session")
def quick_config():
    """Default world shrunk to a fast-but-real training setup."""
    return ExperimentConfig(
        dataset=DatasetSpec(n_classes=8, shots_per_class=8, test_per_class=10),
        train=TrainControls(detector_epochs=6, classifier_epochs=8),
        seeds=(1,),
    )


def rand_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)
