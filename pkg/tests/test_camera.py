import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from camfit.camera import Intrinsics, default_camera, project
from camfit.errors import ConfigurationError, ProjectionError

CAM = default_camera()


def test_optical_axis_maps_to_principal_point():
    pts = torch.tensor([[0.0, 0.0, 2.0]], dtype=torch.float64)
    uv = project(CAM, pts)
    assert uv.tolist() == [[320.0, 240.0]]


def test_known_projection_value():
    pts = torch.tensor([[1.0, 0.0, 2.0]], dtype=torch.float64)
    uv = project(CAM, pts)
    assert uv.tolist() == [[570.0, 240.0]]  # 500 * 0.5 + 320


@pytest.mark.parametrize("s", [0.5, 2.0, 10.0])
def test_scale_invariance(s, rng):
    pts = torch.tensor(rng.uniform(-1, 1, (50, 3)))
    pts[:, 2] = torch.tensor(rng.uniform(0.5, 8.0, 50))
    a = project(CAM, pts)
    b = project(CAM, s * pts)
    assert float((a - b).abs().max()) < 1e-12


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(-5, 5),
    y=st.floats(-5, 5),
    z=st.floats(0.01, 50),
    s=st.sampled_from([0.5, 2.0, 10.0]),
)
def test_scale_invariance_property(x, y, z, s):
    p = torch.tensor([[x, y, z]], dtype=torch.float64)
    assert float((project(CAM, p) - project(CAM, s * p)).abs().max()) < 1e-9


def test_near_plane_error_names_index():
    pts = torch.tensor([[0.0, 0.0, 2.0], [0.0, 0.0, -1.0]], dtype=torch.float64)
    with pytest.raises(ProjectionError) as exc:
        project(CAM, pts)
    assert exc.value.point_index == 1


def test_projection_gradient_matches_fd(rng):
    pts = torch.tensor(rng.uniform(-1, 1, (10, 3)))
    pts[:, 2] = torch.tensor(rng.uniform(1.0, 6.0, 10))
    probe = torch.tensor(rng.standard_normal((10, 2)))

    leaf = pts.clone().requires_grad_(True)
    val = (project(CAM, leaf) * probe).sum()
    (grad,) = torch.autograd.grad(val, leaf)

    h = 1e-6
    for k in range(pts.numel()):
        up, dn = pts.clone(), pts.clone()
        up.reshape(-1)[k] += h
        dn.reshape(-1)[k] -= h
        fd = float(((project(CAM, up) * probe).sum() - (project(CAM, dn) * probe).sum()) / (2 * h))
        an = float(grad.reshape(-1)[k])
        assert abs(fd - an) / max(abs(an), abs(fd), 1e-8) < 1e-6


def test_invalid_intrinsics_rejected():
    with pytest.raises(ConfigurationError):
        Intrinsics(fx=-1.0, fy=500.0, cx=0, cy=0, width=10, height=10)
    with pytest.raises(ConfigurationError):
        Intrinsics(fx=500.0, fy=500.0, cx=0, cy=0, width=0, height=10)


def test_intrinsics_roundtrip():
    k = default_camera()
    assert Intrinsics.from_dict(k.to_dict()) == k
