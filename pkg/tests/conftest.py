import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtta.adapt import Pretrained
from mtta.codebook import ResidualCodebook
from mtta.networks import MotionDenoiser, PoseEstimator

settings.register_profile("mtta", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mtta")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_pre():
    """Untrained small models: enough for contract tests of the adaptation engine."""
    r = np.random.default_rng(5)
    f = PoseEstimator(hidden=16, rng=r)
    m = MotionDenoiser(latent_dim=8, width=8, rng=r)
    cb = ResidualCodebook(r.normal(0, 0.3, (3, 8, 8)))
    return Pretrained(f, m, cb)
