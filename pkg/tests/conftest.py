import numpy as np
import pytest

from trajadapt import backbone, phantoms


@pytest.fixture(scope="session")
def default_phantom_config():
    return phantoms.PhantomConfig()


@pytest.fixture(scope="session")
def small_net():
    """Tiny frozen backbone for fast structural tests."""
    net, registry = backbone.build_backbone(
        backbone.ArchConfig(height=16, width=16, num_classes=3,
                            base_width=4, depth=2))
    backbone.freeze(net)
    return net, registry


@pytest.fixture(scope="session")
def default_net():
    net, registry = backbone.build_backbone(backbone.ArchConfig())
    backbone.freeze(net)
    return net, registry


@pytest.fixture
def rng():
    return np.random.default_rng(0)
