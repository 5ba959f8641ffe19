"""Simplified all-age parametric body: parameters -> 3D vertices and keypoints.

The body is a coarse procedural humanoid (~300 vertices, 22 joints) whose
shape space is semantic: each coordinate of beta lives in [0, 1] and has a
named, monotone geometric effect. Dimension layout:

    0 age      stature via a piecewise-linear curve + head-proportion morph
    1 gender   shoulder/hip width ratio
    2 height   +-15% stature multiplier
    3 weight   radial girth (torso + limbs)
    4 muscle   limb girth
    5..        small generic morphs

The forward map is

    vertices = tau + R(phi) @ LBS(W, shaped(beta), FK(theta, joints(beta)))

with shaped(beta) = stature(beta) * template + sum_s (beta_s - 0.5) * B_s.
It is deterministic and differentiable w.r.t. every parameter, with arbitrary
leading batch dimensions on all state tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError
from .so3 import rodrigues

DTYPE = torch.float64

AGE_DIM = 0
GENDER_DIM = 1
HEIGHT_DIM = 2
WEIGHT_DIM = 3
MUSCLE_DIM = 4
SEMANTIC_DIMS = 5  # minimum shape_dim

# (age coordinate, stature in meters); ages must be increasing.
DEFAULT_STATURE_ANCHORS = (
    (0.02, 0.70),  # baby
    (0.06, 0.90),  # toddler
    (0.14, 1.20),  # child
    (0.35, 1.55),  # teenager
    (0.66, 1.75),  # adult
    (0.92, 1.70),  # senior
)

HEIGHT_SPAN = 0.3  # height dim maps to a (1 +- 0.15) stature multiplier

SPARSE_KEYPOINT_NAMES = (
    "nose",
    "head_top",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
    "l_foot",
    "r_foot",
)

HEAD_TOP_KP = 1
NECK_KP = 2


@dataclass(frozen=True)
class BodyConfig:
    vertex_count: int
    joint_count: int = 22
    shape_dim: int = 10
    sparse_kp_count: int = 17
    dense_kp_count: int = 64

    def __post_init__(self):
        for name in ("vertex_count", "joint_count", "shape_dim", "sparse_kp_count", "dense_kp_count"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.shape_dim < SEMANTIC_DIMS:
            raise ConfigurationError(f"shape_dim must be >= {SEMANTIC_DIMS} (semantic dims)")


@dataclass
class PersonState:
    """Per-person parameter vector Theta = (beta, phi, tau, theta).

    beta: (S,) in [0, 1]; phi: (3,) axis-angle; tau: (3,) meters, camera
    frame with +z into the scene; theta: (J-1, 3) axis-angle per non-root
    joint.
    """

    beta: torch.Tensor
    phi: torch.Tensor
    tau: torch.Tensor
    theta: torch.Tensor

    def __post_init__(self):
        self.beta = torch.as_tensor(self.beta, dtype=DTYPE)
        self.phi = torch.as_tensor(self.phi, dtype=DTYPE)
        self.tau = torch.as_tensor(self.tau, dtype=DTYPE)
        self.theta = torch.as_tensor(self.theta, dtype=DTYPE)

    def check_model(self, config: BodyConfig) -> None:
        if self.beta.shape != (config.shape_dim,):
            raise ConfigurationError(
                f"beta has shape {tuple(self.beta.shape)}, expected ({config.shape_dim},)"
            )
        if self.phi.shape != (3,) or self.tau.shape != (3,):
            raise ConfigurationError("phi and tau must have shape (3,)")
        if self.theta.shape != (config.joint_count - 1, 3):
            raise ConfigurationError(
                f"theta has shape {tuple(self.theta.shape)}, expected ({config.joint_count - 1}, 3)"
            )

    def is_finite(self) -> bool:
        return all(
            bool(torch.isfinite(t).all()) for t in (self.beta, self.phi, self.tau, self.theta)
        )

    def clone(self) -> "PersonState":
        return PersonState(
            self.beta.detach().clone(),
            self.phi.detach().clone(),
            self.tau.detach().clone(),
            self.theta.detach().clone(),
        )

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "phi": self.phi.tolist(),
            "tau": self.tau.tolist(),
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PersonState":
        return cls(
            beta=torch.tensor(d["beta"], dtype=DTYPE),
            phi=torch.tensor(d["phi"], dtype=DTYPE),
            tau=torch.tensor(d["tau"], dtype=DTYPE),
            theta=torch.tensor(d["theta"], dtype=DTYPE),
        )


@dataclass
class Mesh:
    vertices: torch.Tensor  # (V, 3) meters, camera frame


@dataclass
class SceneParams:
    """All persons of one scene stacked into four parameter blocks.

    Shapes: beta (..., P, S), phi (..., P, 3), tau (..., P, 3),
    theta (..., P, J-1, 3). Leading batch dimensions are allowed so many
    parameter settings can be pushed through the forward map at once.
    """

    beta: torch.Tensor
    phi: torch.Tensor
    tau: torch.Tensor
    theta: torch.Tensor

    BLOCKS = ("beta", "phi", "tau", "theta")

    @property
    def person_count(self) -> int:
        return self.beta.shape[-2]

    @classmethod
    def from_states(cls, states: list["PersonState"]) -> "SceneParams":
        if not states:
            raise ConfigurationError("scene needs at least one person")
        return cls(
            beta=torch.stack([s.beta for s in states]),
            phi=torch.stack([s.phi for s in states]),
            tau=torch.stack([s.tau for s in states]),
            theta=torch.stack([s.theta for s in states]),
        )

    def to_states(self) -> list["PersonState"]:
        if self.beta.ndim != 2:
            raise ConfigurationError("to_states requires unbatched params")
        return [
            PersonState(
                self.beta[p].detach().clone(),
                self.phi[p].detach().clone(),
                self.tau[p].detach().clone(),
                self.theta[p].detach().clone(),
            )
            for p in range(self.person_count)
        ]

    def blocks(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.BLOCKS}

    def detach_clone(self) -> "SceneParams":
        return SceneParams(**{k: v.detach().clone() for k, v in self.blocks().items()})

    def map(self, fn) -> "SceneParams":
        return SceneParams(**{k: fn(v) for k, v in self.blocks().items()})

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.blocks().values())


@dataclass
class BodyModel:
    """Immutable body model data. Safe to share across threads; the forward
    map is pure."""

    config: BodyConfig
    template_vertices: torch.Tensor  # (V, 3), canonical pose, unit stature
    shape_blendshapes: torch.Tensor  # (S, V, 3) meter offsets on the unit body
    stature_ages: torch.Tensor  # (A,) increasing age coordinates
    stature_values: torch.Tensor  # (A,) meters
    joint_regressor: torch.Tensor  # (J, V) row-stochastic
    skinning_weights: torch.Tensor  # (V, J) row-stochastic
    kinematic_parents: tuple  # length J, -1 for the root
    sparse_kp_regressor: torch.Tensor  # (K_sparse, V) row-stochastic
    dense_kp_regressor: torch.Tensor  # (K_dense, V) row-stochastic
    height_span: float = HEIGHT_SPAN
    meta: dict = field(default_factory=dict)  # builder annotations (vertex tags)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        cfg = self.config
        v, j, s = cfg.vertex_count, cfg.joint_count, cfg.shape_dim
        if self.template_vertices.shape != (v, 3):
            raise ConfigurationError("template_vertices shape mismatch")
        if self.shape_blendshapes.shape != (s, v, 3):
            raise ConfigurationError("shape_blendshapes shape mismatch")
        if self.joint_regressor.shape != (j, v):
            raise ConfigurationError("joint_regressor shape mismatch")
        if self.skinning_weights.shape != (v, j):
            raise ConfigurationError("skinning_weights shape mismatch")
        if self.sparse_kp_regressor.shape != (cfg.sparse_kp_count, v):
            raise ConfigurationError("sparse_kp_regressor shape mismatch")
        if self.dense_kp_regressor.shape != (cfg.dense_kp_count, v):
            raise ConfigurationError("dense_kp_regressor shape mismatch")
        for name, mat in (
            ("joint_regressor", self.joint_regressor),
            ("skinning_weights", self.skinning_weights),
            ("sparse_kp_regressor", self.sparse_kp_regressor),
            ("dense_kp_regressor", self.dense_kp_regressor),
        ):
            sums = mat.sum(-1)
            if bool((mat < -1e-12).any()):
                raise ConfigurationError(f"{name} has negative entries")
            if bool((sums - 1.0).abs().max() > 1e-9):
                raise ConfigurationError(f"{name} rows must sum to 1 +- 1e-9")
        parents = list(self.kinematic_parents)
        if len(parents) != j or parents.count(-1) != 1 or parents[0] != -1:
            raise ConfigurationError("kinematic_parents must have exactly one root at index 0")
        for k in range(1, j):
            if not (0 <= parents[k] < k):
                raise ConfigurationError("kinematic_parents must be topologically ordered (parent < child)")
        ages = self.stature_ages
        vals = self.stature_values
        if ages.ndim != 1 or ages.shape != vals.shape or ages.shape[0] < 2:
            raise ConfigurationError("stature curve needs >= 2 (age, value) anchors")
        if bool((ages[1:] <= ages[:-1]).any()):
            raise ConfigurationError("stature ages must be strictly increasing")
        if bool((vals <= 0).any()):
            raise ConfigurationError("stature values must be positive")
        peak = int(torch.argmax(vals))
        if bool((vals[1 : peak + 1] < vals[:peak]).any()):
            raise ConfigurationError("stature curve must be non-decreasing up to its peak")

    def to_dict(self) -> dict:
        return {
            "config": {
                "vertex_count": self.config.vertex_count,
                "joint_count": self.config.joint_count,
                "shape_dim": self.config.shape_dim,
                "sparse_kp_count": self.config.sparse_kp_count,
                "dense_kp_count": self.config.dense_kp_count,
            },
            "template_vertices": self.template_vertices.tolist(),
            "shape_blendshapes": self.shape_blendshapes.tolist(),
            "stature_ages": self.stature_ages.tolist(),
            "stature_values": self.stature_values.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
            "skinning_weights": self.skinning_weights.tolist(),
            "kinematic_parents": list(self.kinematic_parents),
            "sparse_kp_regressor": self.sparse_kp_regressor.tolist(),
            "dense_kp_regressor": self.dense_kp_regressor.tolist(),
            "height_span": self.height_span,
            "meta": {k: list(v) if isinstance(v, (list, tuple)) else v for k, v in self.meta.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyModel":
        cfg = BodyConfig(**{k: int(v) for k, v in d["config"].items()})
        t = lambda key: torch.tensor(d[key], dtype=DTYPE)  # noqa: E731
        return cls(
            config=cfg,
            template_vertices=t("template_vertices"),
            shape_blendshapes=t("shape_blendshapes"),
            stature_ages=t("stature_ages"),
            stature_values=t("stature_values"),
            joint_regressor=t("joint_regressor"),
            skinning_weights=t("skinning_weights"),
            kinematic_parents=tuple(int(p) for p in d["kinematic_parents"]),
            sparse_kp_regressor=t("sparse_kp_regressor"),
            dense_kp_regressor=t("dense_kp_regressor"),
            height_span=float(d.get("height_span", HEIGHT_SPAN)),
            meta=dict(d.get("meta", {})),
        )


def stature_scale(model: BodyModel, beta: torch.Tensor) -> torch.Tensor:
    """Stature in meters for beta (..., S) -> (...).

    Piecewise-linear in the age coordinate (constant beyond the end anchors),
    times the height multiplier. Differentiable w.r.t. beta.
    """
    ages = model.stature_ages
    vals = model.stature_values
    a = torch.clamp(beta[..., AGE_DIM], ages[0], ages[-1])
    idx = torch.searchsorted(ages, a.detach().contiguous(), right=True) - 1
    idx = torch.clamp(idx, 0, ages.shape[0] - 2)
    a0, a1 = ages[idx], ages[idx + 1]
    v0, v1 = vals[idx], vals[idx + 1]
    base = v0 + (v1 - v0) * (a - a0) / (a1 - a0)
    return base * (1.0 + model.height_span * (beta[..., HEIGHT_DIM] - 0.5))


def shaped_template(model: BodyModel, beta: torch.Tensor) -> torch.Tensor:
    """Rest-pose shaped vertices for beta (..., S) -> (..., V, 3)."""
    scale = stature_scale(model, beta)
    morph = torch.einsum("...s,svk->...vk", beta - 0.5, model.shape_blendshapes)
    return scale[..., None, None] * model.template_vertices + morph


def _forward_kinematics(
    model: BodyModel, rest_joints: torch.Tensor, local_rot: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """World transforms per joint. rest_joints (..., J, 3); local_rot
    (..., J-1, 3, 3) for non-root joints. Root rotation is identity (the
    global orientation is applied outside). Returns (rot (..., J, 3, 3),
    trans (..., J, 3))."""
    parents = model.kinematic_parents
    j_count = model.config.joint_count
    eye = torch.eye(3, dtype=rest_joints.dtype, device=rest_joints.device)
    rots = [eye.expand(rest_joints.shape[:-2] + (3, 3))]
    trans = [rest_joints[..., 0, :]]
    for j in range(1, j_count):
        p = parents[j]
        bone = rest_joints[..., j, :] - rest_joints[..., p, :]
        rots.append(rots[p] @ local_rot[..., j - 1, :, :])
        trans.append(trans[p] + (rots[p] @ bone.unsqueeze(-1)).squeeze(-1))
    return torch.stack(rots, dim=-3), torch.stack(trans, dim=-2)


def synthesize_vertices(
    model: BodyModel,
    beta: torch.Tensor,
    phi: torch.Tensor,
    tau: torch.Tensor,
    theta: torch.Tensor,
) -> torch.Tensor:
    """Batched forward map: (..., S), (..., 3), (..., 3), (..., J-1, 3) ->
    (..., V, 3)."""
    s = model.config.shape_dim
    j_count = model.config.joint_count
    if beta.shape[-1] != s:
        raise ConfigurationError(f"beta last dim {beta.shape[-1]} != shape_dim {s}")
    if theta.shape[-2:] != (j_count - 1, 3):
        raise ConfigurationError(
            f"theta trailing shape {tuple(theta.shape[-2:])} != ({j_count - 1}, 3)"
        )
    if phi.shape[-1] != 3 or tau.shape[-1] != 3:
        raise ConfigurationError("phi and tau must end in dimension 3")

    shaped = shaped_template(model, beta)
    rest_joints = torch.matmul(model.joint_regressor, shaped)
    local_rot = rodrigues(theta)
    world_rot, world_trans = _forward_kinematics(model, rest_joints, local_rot)

    # LBS: v_i = sum_j w_ij (R_j (v_hat_i - J_j) + t_j). The blended per-vertex
    # rotations are computed as one (V, J) @ (..., J, 9) matmul to keep large
    # batched evaluations (vectorized finite differences) cheap.
    offsets = world_trans - (world_rot @ rest_joints.unsqueeze(-1)).squeeze(-1)
    rot_flat = world_rot.reshape(*world_rot.shape[:-2], 9)
    blended_rot = torch.matmul(model.skinning_weights, rot_flat)  # (..., V, 9)
    blended_off = torch.matmul(model.skinning_weights, offsets)  # (..., V, 3)
    skinned = (
        torch.stack(
            [
                (blended_rot[..., 0:3] * shaped).sum(-1),
                (blended_rot[..., 3:6] * shaped).sum(-1),
                (blended_rot[..., 6:9] * shaped).sum(-1),
            ],
            -1,
        )
        + blended_off
    )

    root_rot = rodrigues(phi)
    return tau.unsqueeze(-2) + skinned @ root_rot.transpose(-1, -2)


def synthesize(model: BodyModel, state: PersonState) -> Mesh:
    """Single-person forward map Theta -> Mesh."""
    state.check_model(model.config)
    verts = synthesize_vertices(model, state.beta, state.phi, state.tau, state.theta)
    return Mesh(vertices=verts)


def regress_joints(model: BodyModel, mesh: Mesh | torch.Tensor) -> torch.Tensor:
    """Joint positions (..., J, 3) = joint_regressor @ vertices."""
    verts = mesh.vertices if isinstance(mesh, Mesh) else mesh
    if verts.shape[-2] != model.config.vertex_count:
        raise ConfigurationError("vertex count mismatch in regress_joints")
    return torch.einsum("jv,...vk->...jk", model.joint_regressor, verts)


def regress_keypoints(model: BodyModel, mesh: Mesh | torch.Tensor, which: str) -> torch.Tensor:
    """3D keypoints regressed from vertices; ``which`` is 'sparse' or 'dense'."""
    verts = mesh.vertices if isinstance(mesh, Mesh) else mesh
    if verts.shape[-2] != model.config.vertex_count:
        raise ConfigurationError("vertex count mismatch in regress_keypoints")
    if which == "sparse":
        reg = model.sparse_kp_regressor
    elif which == "dense":
        reg = model.dense_kp_regressor
    else:
        raise ConfigurationError(f"unknown keypoint set {which!r}")
    return torch.einsum("kv,...vi->...ki", reg, verts)


def canonical_state(model: BodyModel, tau_z: float = 2.0) -> PersonState:
    """All-0.5 shape, zero pose, placed tau_z meters down the optical axis."""
    cfg = model.config
    return PersonState(
        beta=torch.full((cfg.shape_dim,), 0.5, dtype=DTYPE),
        phi=torch.zeros(3, dtype=DTYPE),
        tau=torch.tensor([0.0, 0.0, tau_z], dtype=DTYPE),
        theta=torch.zeros(cfg.joint_count - 1, 3, dtype=DTYPE),
    )


# ---------------------------------------------------------------------------
# Procedural default model
# ---------------------------------------------------------------------------

_JOINT_NAMES = (
    "pelvis",
    "l_hip",
    "r_hip",
    "spine1",
    "l_knee",
    "r_knee",
    "spine2",
    "l_ankle",
    "r_ankle",
    "chest",
    "l_foot",
    "r_foot",
    "neck",
    "l_collar",
    "r_collar",
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
)

_PARENT_NAMES = {
    "pelvis": None,
    "l_hip": "pelvis",
    "r_hip": "pelvis",
    "spine1": "pelvis",
    "l_knee": "l_hip",
    "r_knee": "r_hip",
    "spine2": "spine1",
    "l_ankle": "l_knee",
    "r_ankle": "r_knee",
    "chest": "spine2",
    "l_foot": "l_ankle",
    "r_foot": "r_ankle",
    "neck": "chest",
    "l_collar": "chest",
    "r_collar": "chest",
    "head": "neck",
    "l_shoulder": "l_collar",
    "r_shoulder": "r_collar",
    "l_elbow": "l_shoulder",
    "r_elbow": "r_shoulder",
    "l_wrist": "l_elbow",
    "r_wrist": "r_elbow",
}

# Canonical pose: y down (camera image convention), x to the subject's left,
# face toward -z (toward the camera). Units: fractions of stature.
_JOINT_POS = {
    "pelvis": (0.0, 0.0, 0.0),
    "l_hip": (0.09, 0.03, 0.0),
    "r_hip": (-0.09, 0.03, 0.0),
    "spine1": (0.0, -0.10, 0.0),
    "l_knee": (0.10, 0.28, 0.0),
    "r_knee": (-0.10, 0.28, 0.0),
    "spine2": (0.0, -0.19, 0.0),
    "l_ankle": (0.10, 0.50, 0.0),
    "r_ankle": (-0.10, 0.50, 0.0),
    "chest": (0.0, -0.27, 0.0),
    "l_foot": (0.10, 0.53, -0.06),
    "r_foot": (-0.10, 0.53, -0.06),
    "neck": (0.0, -0.36, 0.0),
    "l_collar": (0.06, -0.34, 0.0),
    "r_collar": (-0.06, -0.34, 0.0),
    "head": (0.0, -0.40, 0.0),
    "l_shoulder": (0.17, -0.34, 0.0),
    "r_shoulder": (-0.17, -0.34, 0.0),
    "l_elbow": (0.35, -0.34, 0.0),
    "r_elbow": (-0.35, -0.34, 0.0),
    "l_wrist": (0.52, -0.34, 0.0),
    "r_wrist": (-0.52, -0.34, 0.0),
}

_HEAD_CENTER = np.array([0.0, -0.435, 0.0])


class _MeshBuilder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.weights: list[dict[str, float]] = []
        self.radial: list[np.ndarray] = []
        self.tags: list[set] = []
        self.named: dict[str, int] = {}
        self.station_rings: dict[str, list[int]] = {}

    def add_vertex(self, pos, bind, radial, tags=(), name=None):
        idx = len(self.verts)
        self.verts.append(np.asarray(pos, dtype=np.float64))
        self.weights.append(dict(bind))
        self.radial.append(np.asarray(radial, dtype=np.float64))
        self.tags.append(set(tags))
        if name is not None:
            self.named[name] = idx
        return idx

    def add_ring(self, center, axis, r, n, bind, tags=(), flatten=0.82, station=None, phase=0.0):
        center = np.asarray(center, dtype=np.float64)
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u)
        w = np.cross(axis, u)
        idxs = []
        for i in range(n):
            ang = phase + 2.0 * np.pi * i / n
            radial = r * np.cos(ang) * u + r * flatten * np.sin(ang) * w
            idxs.append(self.add_vertex(center + radial, bind, radial, tags))
        if station is not None:
            self.station_rings.setdefault(station, []).extend(idxs)
        return idxs


def _band(y, lo, hi):
    """Smooth bump on [lo, hi] (cosine ramp), 0 outside."""
    if y <= lo or y >= hi:
        return 0.0
    t = (y - lo) / (hi - lo)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * t))


def _build_limb(b, side, sign):
    hip = np.array(_JOINT_POS[f"{side}_hip"])
    knee = np.array(_JOINT_POS[f"{side}_knee"])
    ankle = np.array(_JOINT_POS[f"{side}_ankle"])
    foot = np.array(_JOINT_POS[f"{side}_foot"])
    down = np.array([0.0, 1.0, 0.0])
    leg = {"limb", "leg"}

    b.add_ring(hip, down, 0.075, 6, {"pelvis": 0.25, f"{side}_hip": 0.75}, leg, station=f"{side}_hip")
    for t, r in ((0.35, 0.062), (0.7, 0.055)):
        b.add_ring(hip + t * (knee - hip), down, r, 6, {f"{side}_hip": 1.0}, leg)
    b.add_ring(knee, down, 0.048, 6, {f"{side}_hip": 0.35, f"{side}_knee": 0.65}, leg, station=f"{side}_knee")
    for t, r in ((0.32, 0.042), (0.66, 0.035)):
        b.add_ring(knee + t * (ankle - knee), down, r, 6, {f"{side}_knee": 1.0}, leg)
    b.add_ring(ankle, down, 0.030, 6, {f"{side}_knee": 0.35, f"{side}_ankle": 0.65}, leg, station=f"{side}_ankle")
    mid = ankle + 0.5 * (foot - ankle)
    b.add_ring(mid, foot - ankle, 0.028, 6, {f"{side}_ankle": 1.0}, leg)
    b.add_ring(foot, foot - ankle, 0.026, 6, {f"{side}_ankle": 0.4, f"{side}_foot": 0.6}, leg, station=f"{side}_foot")
    toe = foot + np.array([0.0, 0.008, -0.045])
    b.add_vertex(toe, {f"{side}_foot": 1.0}, toe - foot, leg)

    collar = np.array(_JOINT_POS[f"{side}_collar"])
    shoulder = np.array(_JOINT_POS[f"{side}_shoulder"])
    elbow = np.array(_JOINT_POS[f"{side}_elbow"])
    wrist = np.array(_JOINT_POS[f"{side}_wrist"])
    out = np.array([sign, 0.0, 0.0])
    arm = {"limb", "arm"}

    b.add_ring(collar, out, 0.052, 6, {"chest": 0.35, f"{side}_collar": 0.65}, {"torso"}, station=f"{side}_collar")
    b.add_ring(collar + 0.5 * (shoulder - collar), out, 0.050, 6, {f"{side}_collar": 1.0}, {"torso"})
    b.add_ring(shoulder, out, 0.045, 6, {f"{side}_collar": 0.3, f"{side}_shoulder": 0.7}, arm, station=f"{side}_shoulder")
    for t, r in ((0.4, 0.042), (0.75, 0.038)):
        b.add_ring(shoulder + t * (elbow - shoulder), out, r, 6, {f"{side}_shoulder": 1.0}, arm)
    b.add_ring(elbow, out, 0.034, 6, {f"{side}_shoulder": 0.35, f"{side}_elbow": 0.65}, arm, station=f"{side}_elbow")
    for t, r in ((0.35, 0.032), (0.7, 0.027)):
        b.add_ring(elbow + t * (wrist - elbow), out, r, 6, {f"{side}_elbow": 1.0}, arm)
    b.add_ring(wrist, out, 0.024, 6, {f"{side}_elbow": 0.35, f"{side}_wrist": 0.65}, arm, station=f"{side}_wrist")
    b.add_ring(wrist + np.array([sign * 0.03, 0.0, 0.0]), out, 0.025, 6, {f"{side}_wrist": 1.0}, arm)
    tip = wrist + np.array([sign * 0.075, 0.0, 0.0])
    b.add_vertex(tip, {f"{side}_wrist": 1.0}, np.array([sign * 0.02, 0.0, 0.0]), arm)


def _build_template() -> _MeshBuilder:
    b = _MeshBuilder()
    down = np.array([0.0, 1.0, 0.0])
    torso = {"torso"}

    # Torso rings are softly blended across neighboring spine joints so
    # every joint's skinning column spans more than one plane (keeps the
    # per-part Procrustes problems in the refitter well conditioned).
    b.add_ring(_JOINT_POS["pelvis"], down, 0.115, 8, {"pelvis": 0.9, "spine1": 0.1}, torso | {"hip_band"}, station="pelvis")
    b.add_ring(_JOINT_POS["spine1"], down, 0.105, 8, {"spine1": 0.8, "pelvis": 0.1, "spine2": 0.1}, torso, station="spine1")
    b.add_ring(_JOINT_POS["spine2"], down, 0.100, 8, {"spine2": 0.8, "spine1": 0.1, "chest": 0.1}, torso, station="spine2")
    b.add_ring(_JOINT_POS["chest"], down, 0.110, 8, {"chest": 0.85, "spine2": 0.15}, torso | {"shoulder_band"}, station="chest")
    b.add_ring((0.0, -0.325, 0.0), down, 0.095, 8, {"chest": 1.0}, torso | {"shoulder_band"})
    b.add_ring(_JOINT_POS["neck"], down, 0.045, 8, {"chest": 0.4, "neck": 0.6}, {"neck"}, station="neck")

    head = {"head"}
    b.add_ring(_JOINT_POS["head"], down, 0.050, 8, {"neck": 0.3, "head": 0.7}, head, station="head")
    for y, r in ((-0.415, 0.070), (-0.445, 0.075), (-0.465, 0.055)):
        b.add_ring((0.0, y, 0.0), down, r, 8, {"head": 1.0}, head, flatten=0.95)
    top = np.array([0.0, -0.478, 0.0])
    b.add_vertex(top, {"head": 1.0}, top - _HEAD_CENTER, head, name="head_top")
    nose = np.array([0.0, -0.437, -0.082])
    b.add_vertex(nose, {"head": 1.0}, nose - _HEAD_CENTER, head, name="nose")

    _build_limb(b, "l", +1.0)
    _build_limb(b, "r", -1.0)
    return b


def _blendshapes(
    tags: list[set], radial: np.ndarray, verts: np.ndarray, head_center: np.ndarray, shape_dim: int
) -> np.ndarray:
    v_count = verts.shape[0]
    bs = np.zeros((shape_dim, v_count, 3))

    for i in range(v_count):
        v = verts[i]
        y = v[1]

        if "head" in tags[i]:
            # Age: heads shrink (proportionally) from baby to senior. This is
            # what makes age geometrically distinguishable from height.
            bs[AGE_DIM, i] = -0.5 * (v - head_center)
        if "shoulder_band" in tags[i] or ("arm" in tags[i] and -0.42 < y < -0.26):
            bs[GENDER_DIM, i, 0] += -0.35 * v[0] * _band(y, -0.42, -0.26)
        if "hip_band" in tags[i] or ("leg" in tags[i] and -0.04 < y < 0.10):
            bs[GENDER_DIM, i, 0] += 0.30 * v[0] * _band(y, -0.04, 0.10)
        if "head" not in tags[i]:
            bs[WEIGHT_DIM, i] = 0.55 * radial[i]
        if "limb" in tags[i]:
            bs[MUSCLE_DIM, i] = 0.45 * radial[i]
        for k in range(SEMANTIC_DIMS, shape_dim):
            w = 6.0 + 2.0 * (k - SEMANTIC_DIMS)
            bs[k, i] = 0.02 * np.sin(w * y + 0.7 * k) * radial[i]
    # HEIGHT_DIM acts through the stature multiplier only; its tensor stays 0.
    return bs


def build_default_model(shape_dim: int = 10, dense_kp_count: int = 64) -> BodyModel:
    """Deterministic coarse humanoid with the default semantic shape space."""
    b = _build_template()
    verts = np.stack(b.verts)

    height = verts[:, 1].max() - verts[:, 1].min()
    verts = verts / height
    radial = np.stack(b.radial) / height

    v_count = verts.shape[0]
    j_count = len(_JOINT_NAMES)
    name_to_idx = {n: i for i, n in enumerate(_JOINT_NAMES)}

    skin = np.zeros((v_count, j_count))
    for i, wd in enumerate(b.weights):
        for jn, w in wd.items():
            skin[i, name_to_idx[jn]] = w
    skin /= skin.sum(1, keepdims=True)

    jreg = np.zeros((j_count, v_count))
    for jn, ring in b.station_rings.items():
        jreg[name_to_idx[jn], ring] = 1.0 / len(ring)

    blend = _blendshapes(b.tags, radial, verts, _HEAD_CENTER / height, shape_dim)

    # Sparse keypoints: named head vertices plus station rings.
    sparse = np.zeros((len(SPARSE_KEYPOINT_NAMES), v_count))
    sparse[0, b.named["nose"]] = 1.0
    sparse[1, b.named["head_top"]] = 1.0
    ring_kp = {
        2: "neck",
        3: "l_shoulder",
        4: "r_shoulder",
        5: "l_elbow",
        6: "r_elbow",
        7: "l_wrist",
        8: "r_wrist",
        9: "l_hip",
        10: "r_hip",
        11: "l_knee",
        12: "r_knee",
        13: "l_ankle",
        14: "r_ankle",
        15: "l_foot",
        16: "r_foot",
    }
    for row, jn in ring_kp.items():
        ring = b.station_rings[jn]
        sparse[row, ring] = 1.0 / len(ring)

    dense_idx = np.linspace(0, v_count - 1, dense_kp_count).round().astype(int)
    dense = np.zeros((dense_kp_count, v_count))
    dense[np.arange(dense_kp_count), dense_idx] = 1.0

    ages = np.array([a for a, _ in DEFAULT_STATURE_ANCHORS])
    vals = np.array([v for _, v in DEFAULT_STATURE_ANCHORS])

    cfg = BodyConfig(
        vertex_count=v_count,
        joint_count=j_count,
        shape_dim=shape_dim,
        sparse_kp_count=len(SPARSE_KEYPOINT_NAMES),
        dense_kp_count=dense_kp_count,
    )
    parents = tuple(
        -1 if _PARENT_NAMES[n] is None else name_to_idx[_PARENT_NAMES[n]] for n in _JOINT_NAMES
    )
    tens = lambda a: torch.tensor(np.asarray(a), dtype=DTYPE)  # noqa: E731
    return BodyModel(
        config=cfg,
        template_vertices=tens(verts),
        shape_blendshapes=tens(blend),
        stature_ages=tens(ages),
        stature_values=tens(vals),
        joint_regressor=tens(jreg),
        skinning_weights=tens(skin),
        kinematic_parents=parents,
        sparse_kp_regressor=tens(sparse),
        dense_kp_regressor=tens(dense),
        meta={
            "joint_names": list(_JOINT_NAMES),
            "nose_vertex": b.named["nose"],
            "head_top_vertex": b.named["head_top"],
        },
    )
