import numpy as np
import pytest
import torch

from camfit.body_model import build_default_model, canonical_state
from camfit.camera import default_camera
from camfit.semantic_shape import default_catalog


@pytest.fixture(scope="session")
def model():
    return build_default_model()


@pytest.fixture(scope="session")
def camera():
    return default_camera()


@pytest.fixture(scope="session")
def catalog():
    return default_catalog()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_state(model, rng, z=3.0, theta_scale=0.3, phi_scale=0.3):
    from camfit.body_model import PersonState

    cfg = model.config
    return PersonState(
        beta=rng.uniform(0, 1, cfg.shape_dim),
        phi=rng.uniform(-phi_scale, phi_scale, 3),
        tau=np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), z + rng.uniform(-0.5, 0.5)]),
        theta=rng.uniform(-theta_scale, theta_scale, (cfg.joint_count - 1, 3)),
    )


@pytest.fixture()
def some_state(model):
    return canonical_state(model)
