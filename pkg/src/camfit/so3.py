"""Axis-angle rotation helpers.

All maps are written to stay smooth at the zero rotation so finite-difference
gradient checks pass there (optimization typically starts at theta = 0).
"""

from __future__ import annotations

import torch

_SMALL_SQ = 1e-8  # below this squared angle, switch to Taylor branches


def skew(v: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric matrix of v: (..., 3) -> (..., 3, 3)."""
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack(
        [
            torch.stack([o, -z, y], -1),
            torch.stack([z, o, -x], -1),
            torch.stack([-y, x, o], -1),
        ],
        -2,
    )


def rodrigues(v: torch.Tensor) -> torch.Tensor:
    """Axis-angle vectors (..., 3) -> rotation matrices (..., 3, 3).

    Uses R = I + a(t) K + b(t) K^2 with t = ||v||^2, where a and b are even
    analytic functions of the angle; Taylor branches keep gradients exact
    near t = 0 (torch.where would otherwise propagate NaNs from 0/0).
    """
    t = (v * v).sum(-1)
    small = t < _SMALL_SQ
    t_safe = torch.where(small, torch.ones_like(t), t)
    theta = torch.sqrt(t_safe)
    a = torch.where(small, 1.0 - t / 6.0 + t * t / 120.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - t / 24.0 + t * t / 720.0, (1.0 - torch.cos(theta)) / t_safe)
    k = skew(v)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def geodesic_sq(r1: torch.Tensor, r2: torch.Tensor) -> torch.Tensor:
    """Squared rotation angle (radians^2) between two rotation matrices.

    theta^2 as a function of u = 1 - cos(theta) is analytic at u = 0;
    the series branch avoids the arccos derivative blow-up at identity.
    The tiny dead zone flushes floating-point trace noise of identical
    rotations to an exact zero (value and gradient), so states sitting at
    their reference are true fixed points of the optimizer.
    """
    trace = (r1 * r2).sum((-2, -1))  # trace(r1^T r2)
    u_raw = torch.clamp((3.0 - trace) / 2.0, 0.0, 2.0)
    u = torch.where(u_raw < 1e-13, torch.zeros_like(u_raw), u_raw)
    small = u < 1e-4
    u_safe = torch.where(small, torch.zeros_like(u), u)
    exact = torch.arccos(torch.clamp(1.0 - u_safe, -1.0, 1.0)) ** 2
    series = 2.0 * u + u * u / 3.0 + 4.0 * u ** 3 / 45.0
    return torch.where(small, series, exact)


def log_map(r: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) -> axis-angle vectors (..., 3).

    Quaternion route; stable for angles near 0 and near pi. Not meant to be
    differentiated (used by the mesh refitter, which is gradient-free).
    """
    r = r.detach()
    batch = r.shape[:-2]
    rf = r.reshape(-1, 3, 3)
    m00, m01, m02 = rf[:, 0, 0], rf[:, 0, 1], rf[:, 0, 2]
    m10, m11, m12 = rf[:, 1, 0], rf[:, 1, 1], rf[:, 1, 2]
    m20, m21, m22 = rf[:, 2, 0], rf[:, 2, 1], rf[:, 2, 2]

    # Shepperd's method: pick the largest of (w, x, y, z) pivots.
    tr = m00 + m11 + m22
    qs = torch.empty(rf.shape[0], 4, dtype=r.dtype, device=r.device)
    cand = torch.stack([tr, m00, m11, m22], -1)
    pivot = cand.argmax(-1)

    s_w = torch.sqrt(torch.clamp(1.0 + tr, min=1e-30)) * 2.0
    q_w = torch.stack([0.25 * s_w, (m21 - m12) / s_w, (m02 - m20) / s_w, (m10 - m01) / s_w], -1)
    s_x = torch.sqrt(torch.clamp(1.0 + m00 - m11 - m22, min=1e-30)) * 2.0
    q_x = torch.stack([(m21 - m12) / s_x, 0.25 * s_x, (m01 + m10) / s_x, (m02 + m20) / s_x], -1)
    s_y = torch.sqrt(torch.clamp(1.0 - m00 + m11 - m22, min=1e-30)) * 2.0
    q_y = torch.stack([(m02 - m20) / s_y, (m01 + m10) / s_y, 0.25 * s_y, (m12 + m21) / s_y], -1)
    s_z = torch.sqrt(torch.clamp(1.0 - m00 - m11 + m22, min=1e-30)) * 2.0
    q_z = torch.stack([(m10 - m01) / s_z, (m02 + m20) / s_z, (m12 + m21) / s_z, 0.25 * s_z], -1)

    for i, q in enumerate([q_w, q_x, q_y, q_z]):
        mask = pivot == i
        qs[mask] = q[mask]

    qs = qs / torch.linalg.norm(qs, dim=-1, keepdim=True)
    # Canonical sign (w >= 0) keeps angles in [0, pi].
    qs = torch.where(qs[:, :1] < 0, -qs, qs)
    w = torch.clamp(qs[:, 0], -1.0, 1.0)
    vec = qs[:, 1:]
    vn = torch.linalg.norm(vec, dim=-1)
    angle = 2.0 * torch.atan2(vn, w)
    scale = torch.where(vn > 1e-12, angle / torch.clamp(vn, min=1e-30), 2.0 * torch.ones_like(vn))
    out = vec * scale[:, None]
    return out.reshape(*batch, 3)
