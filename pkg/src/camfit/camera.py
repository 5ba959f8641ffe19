"""Pinhole perspective projection."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ProjectionError

Z_MIN_DEFAULT = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("image size must be positive")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def default_camera() -> Intrinsics:
    """Fixed synthetic ground-truth camera: 640x480, f = 500 px, centered."""
    return Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def project(k: Intrinsics, points: torch.Tensor, z_min: float = Z_MIN_DEFAULT) -> torch.Tensor:
    """Project camera-frame points (..., N, 3) meters to pixels (..., N, 2).

    Raises ProjectionError naming the (flattened) index of the first point at
    or behind the near plane.
    """
    z = points[..., 2]
    if bool((z <= z_min).any()):
        flat = (z <= z_min).reshape(-1)
        idx = int(torch.nonzero(flat, as_tuple=False)[0, 0])
        raise ProjectionError(
            f"point {idx} has z <= z_min ({z_min:g} m); cannot project", point_index=idx
        )
    u = k.fx * points[..., 0] / z + k.cx
    v = k.fy * points[..., 1] / z + k.cy
    return torch.stack([u, v], -1)
