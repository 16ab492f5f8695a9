"""
Shared pytest fixtures for rfmp tests.

Manifold specs, seeded generators and small datasets/models that several
test modules build on.
"""

import numpy as np
import pytest

from rfmp.config import ModelConfig, PolicyConfig, TrainConfig
from rfmp.distributions import make_rng
from rfmp.flows import FlowParams
from rfmp.manifolds import SPD, Euclidean, Product, Sphere
from rfmp.tasks import gen_reach_demos, gen_strokes


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or rollout tests")


# ============================================================================
# Manifold Fixtures
# ============================================================================

@pytest.fixture
def plane():
    """Euclidean R^2."""
    return Euclidean(2)


@pytest.fixture
def sphere():
    """Unit sphere S^2 in R^3."""
    return Sphere(3)


@pytest.fixture
def spd2():
    """2x2 SPD matrices, affine-invariant metric."""
    return SPD(2)


@pytest.fixture
def pose():
    """R3 x S3 x R1, a position / quaternion / gripper product."""
    return Product((Euclidean(3), Sphere(4), Euclidean(1)))


@pytest.fixture(params=["R2", "S2", "SPD2", "R3xS3xR1"])
def any_manifold(request):
    """Each manifold family in turn."""
    from rfmp.manifolds import parse_manifold

    return parse_manifold(request.param)


# ============================================================================
# Random Streams
# ============================================================================

@pytest.fixture
def rng():
    """Fixed-seed generator."""
    return make_rng(1234)


# ============================================================================
# Training Fixtures
# ============================================================================

@pytest.fixture
def flow_params():
    """Default stable-flow gains (lambda_x = lambda_tau = 2.5)."""
    return FlowParams()


@pytest.fixture
def small_policy():
    """Short horizons keep batches tiny."""
    return PolicyConfig(T_p=4, T_a=2, T_o=2)


@pytest.fixture
def small_model():
    """Narrow network for fast tests."""
    return ModelConfig(embedding_dim=8, hidden=[16, 16])


@pytest.fixture
def quick_train():
    """A handful of epochs on a tiny batch."""
    return TrainConfig(epochs=3, batch_size=16, learning_rate=1e-3)


@pytest.fixture
def stroke_dataset():
    """Four noisy L strokes on the plane."""
    return gen_strokes("L", n_demos=4, noise=0.02, seed=7, length=24)


@pytest.fixture
def reach_dataset():
    """Three expert reach demonstrations on the plane."""
    return gen_reach_demos(n_demos=3, seed=3, sphere=False, length=24)
