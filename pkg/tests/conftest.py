import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from reamil.backbone import BackboneConfig
from reamil.data import SynthConfig, gen_synthetic
from reamil.trainer import TrainConfig, evidence_config, train_baseline, train_reamil

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

logging.getLogger("reamil").setLevel(logging.ERROR)

TINY = SynthConfig(n_train=40, n_val=12, n_test=12, tiles=16, feature_dim=16, k_ev=3, seed=5)
TINY_BACKBONE = BackboneConfig(d_in=16, d_model=16, heads=2, layers=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    manifest = gen_synthetic(TINY, out)
    return out, manifest


@pytest.fixture(scope="session")
def tiny_baseline(tiny_data):
    _, manifest = tiny_data
    return train_baseline(manifest, TINY_BACKBONE, TrainConfig(epochs=8, lr=3e-3, seed=3))


@pytest.fixture(scope="session")
def tiny_reamil(tiny_data, tiny_baseline):
    _, manifest = tiny_data
    return train_reamil(manifest, tiny_baseline.model, evidence_config(epochs=4, seed=3))
