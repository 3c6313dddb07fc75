import numpy as np
import pytest

from cbmrobust.attacks import AttackConfig
from cbmrobust.core import LinearHead
from cbmrobust.data import SyntheticConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(20240814)


@pytest.fixture
def two_class_head():
    return LinearHead(weights=[[1.0, 0.0], [-1.0, 0.0]], bias=[0.0, 0.0])


@pytest.fixture
def attack_cfg():
    return AttackConfig(epsilon=1e-3)


@pytest.fixture(scope="session")
def synth_pair():
    cfg = SyntheticConfig(
        num_concepts=20, num_classes=5, num_features=32,
        n_per_class=125, sharpness=0.9, feature_noise_std=0.05, seed=7,
    )
    return synth_generate(cfg)
