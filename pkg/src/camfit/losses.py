"""Scalar loss terms of the fitting objective.

Total objective:

    L = lambda_2d L_2d + lambda_dense L_dense + lambda_shape L_shape
        + L_init + lambda_depth L_depth

where L_init carries its own per-component weights (beta / phi / vertices /
tau_xy). All terms accept arbitrary leading batch dimensions on the person
parameters so vectorized finite-difference checks stay cheap; observations
are fixed per scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .body_model import BodyModel, PersonState, SceneParams, synthesize_vertices
from .camera import Intrinsics, project
from .errors import ConfigurationError
from .so3 import geodesic_sq, rodrigues

DEPTH_ORDERING = "ordering"
DEPTH_AFFINE_RD = "affine_rd"

TERM_NAMES = ("reproj_2d", "reproj_dense", "shape", "init", "depth")


@dataclass
class Observed2D:
    """2D point observations with confidences in [0, 1]."""

    points: np.ndarray  # (N, 2) pixels
    confidences: np.ndarray  # (N,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if self.points.shape[0] != self.confidences.shape[0]:
            raise ConfigurationError("points and confidences lengths differ")
        if self.confidences.size and (
            self.confidences.min() < 0.0 or self.confidences.max() > 1.0
        ):
            raise ConfigurationError("confidences must lie in [0, 1]")


@dataclass
class DepthCue:
    """Per-person pseudo-ground-truth median depth in meters."""

    value: float
    valid: bool = True

    def __post_init__(self):
        if self.valid and not self.value > 0:
            raise ConfigurationError("valid depth cues must be positive")


@dataclass
class LossWeights:
    lambda_2d: float = 0.01
    lambda_dense: float = 0.001
    lambda_shape: float = 10.0
    lambda_depth: float = 0.0
    lambda_init_beta: float = 0.0
    lambda_init_phi: float = 0.0
    lambda_init_verts: float = 0.0
    lambda_init_tau_xy: float = 0.0
    sigma: float = 100.0  # robustifier scale, pixels
    sigma_d: float = 1.0  # robustifier scale for the affine depth variant, meters
    eps_rel: float = 0.2  # relative margin of the ordering loss
    depth_variant: str = DEPTH_ORDERING

    def __post_init__(self):
        for name in (
            "lambda_2d",
            "lambda_dense",
            "lambda_shape",
            "lambda_depth",
            "lambda_init_beta",
            "lambda_init_phi",
            "lambda_init_verts",
            "lambda_init_tau_xy",
        ):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.sigma <= 0 or self.sigma_d <= 0:
            raise ConfigurationError("robustifier scales must be positive")
        if self.depth_variant not in (DEPTH_ORDERING, DEPTH_AFFINE_RD):
            raise ConfigurationError(f"unknown depth_variant {self.depth_variant!r}")

    def to_dict(self) -> dict:
        return {
            "lambda_2d": self.lambda_2d,
            "lambda_dense": self.lambda_dense,
            "lambda_shape": self.lambda_shape,
            "lambda_depth": self.lambda_depth,
            "lambda_init_beta": self.lambda_init_beta,
            "lambda_init_phi": self.lambda_init_phi,
            "lambda_init_verts": self.lambda_init_verts,
            "lambda_init_tau_xy": self.lambda_init_tau_xy,
            "sigma": self.sigma,
            "sigma_d": self.sigma_d,
            "eps_rel": self.eps_rel,
            "depth_variant": self.depth_variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def geman_mcclure(x, sigma: float):
    """Robust penalty rho(x, sigma) = sigma^2 x^2 / (sigma^2 + x^2).

    Bounded by sigma^2, even, smooth; rho(sigma) = sigma^2 / 2.
    """
    x = torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, torch.Tensor) else x
    return _gm_from_sq(x * x, sigma)


def _gm_from_sq(x_sq: torch.Tensor, sigma: float) -> torch.Tensor:
    # Formulated on the squared residual so compositions with norms stay
    # smooth at zero error.
    s2 = sigma * sigma
    return s2 * x_sq / (s2 + x_sq)


def _reproj_term(
    pred2d: torch.Tensor, points: torch.Tensor, conf: torch.Tensor, sigma: float
) -> torch.Tensor:
    """Mean over points of rho(c * ||pred - obs||): (..., N, 2) -> (...)."""
    if points.shape[-2] == 0:
        return torch.zeros(pred2d.shape[:-2], dtype=pred2d.dtype)
    err_sq = ((pred2d - points) ** 2).sum(-1)
    return _gm_from_sq(conf * conf * err_sq, sigma).mean(-1)


def reprojection_loss(pred2d: torch.Tensor, obs: Observed2D, sigma: float) -> torch.Tensor:
    """Confidence-weighted robust reprojection error for one point set."""
    if pred2d.shape[-2] != obs.points.shape[0]:
        raise ConfigurationError("prediction / observation lengths differ")
    points = torch.as_tensor(obs.points, dtype=torch.float64)
    conf = torch.as_tensor(obs.confidences, dtype=torch.float64)
    return _reproj_term(pred2d, points, conf, sigma)


def shape_loss(beta: torch.Tensor, f) -> torch.Tensor:
    """MSE between beta and the attribute estimate F over all shape dims.

    Dimensions the estimator never provided sit at 0.5 and act as a weak
    centering prior.
    """
    if not isinstance(f, torch.Tensor):
        f = torch.as_tensor(np.asarray(getattr(f, "f", f)), dtype=torch.float64)
    if beta.shape[-1] != f.shape[-1]:
        raise ConfigurationError("beta and F dimensionality differ")
    return ((beta - f) ** 2).mean(-1)


def depth_ordering_loss(
    pred_root_z: torch.Tensor,
    depth: torch.Tensor,
    depth_valid: torch.Tensor,
    eps_rel: float = 0.2,
) -> torch.Tensor:
    """Pairwise hinge on predicted root depths against cue depths.

    For each valid pair with margin m = eps_rel * max(d_i, d_j):
    cue depths within m of each other pull the pair onto one plane
    (penalize |z_i - z_j| beyond m); otherwise the cue ordering is enforced
    with margin m. Zero for scenes with fewer than two valid cues.
    """
    p = depth.shape[0]
    lead = pred_root_z.shape[:-1]
    idx = torch.nonzero(depth_valid, as_tuple=False).reshape(-1)
    if idx.numel() < 2:
        return torch.zeros(lead, dtype=pred_root_z.dtype)
    iu, ju = torch.triu_indices(p, p, offset=1)
    keep = depth_valid[iu] & depth_valid[ju]
    iu, ju = iu[keep], ju[keep]
    d_i, d_j = depth[iu], depth[ju]
    m = eps_rel * torch.maximum(d_i, d_j)
    same_plane = (d_i - d_j).abs() <= m

    z_i = pred_root_z[..., iu]
    z_j = pred_root_z[..., ju]
    term_same = torch.relu((z_i - z_j).abs() - m) ** 2
    lo_z = torch.where(d_i <= d_j, z_i, z_j)
    hi_z = torch.where(d_i <= d_j, z_j, z_i)
    term_order = torch.relu(lo_z - hi_z + m) ** 2
    return torch.where(same_plane, term_same, term_order).mean(-1)


def affine_root_depth_loss(
    pred_root_z: torch.Tensor,
    depth: torch.Tensor,
    depth_valid: torch.Tensor,
    sigma_d: float = 1.0,
) -> torch.Tensor:
    """Robust residual of the best affine map z ~ a*d + b (refit per call).

    The fit absorbs any global affine miscalibration of the depth expert;
    only relative structure is penalized. Needs >= 2 valid persons, else 0.
    """
    lead = pred_root_z.shape[:-1]
    idx = torch.nonzero(depth_valid, as_tuple=False).reshape(-1)
    if idx.numel() < 2:
        return torch.zeros(lead, dtype=pred_root_z.dtype)
    d = depth[idx]
    z = pred_root_z[..., idx]
    d_mean = d.mean()
    z_mean = z.mean(-1, keepdim=True)
    var_d = ((d - d_mean) ** 2).mean()
    if float(var_d) < 1e-18:
        a = torch.ones(lead + (1,), dtype=pred_root_z.dtype)
    else:
        cov = ((d - d_mean) * (z - z_mean)).mean(-1, keepdim=True)
        a = torch.clamp(cov / var_d, min=1e-3)
    b = z_mean - a * d_mean
    resid = a * d + b - z
    return _gm_from_sq(resid * resid, sigma_d).mean(-1)


def init_reg_components(
    beta: torch.Tensor,
    phi: torch.Tensor,
    tau: torch.Tensor,
    verts: torch.Tensor,
    prev_beta: torch.Tensor,
    prev_rot: torch.Tensor,
    prev_tau: torch.Tensor,
    prev_verts: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Per-person drift penalty toward the previous optimization state.

    Shapes carry a trailing person axis: returns (..., P).
    """
    out = torch.zeros(beta.shape[:-1], dtype=beta.dtype)
    if weights.lambda_init_beta > 0:
        out = out + weights.lambda_init_beta * ((beta - prev_beta) ** 2).mean(-1)
    if weights.lambda_init_phi > 0:
        out = out + weights.lambda_init_phi * geodesic_sq(rodrigues(phi), prev_rot)
    if weights.lambda_init_verts > 0:
        out = out + weights.lambda_init_verts * ((verts - prev_verts) ** 2).mean((-2, -1))
    if weights.lambda_init_tau_xy > 0:
        # Tether the viewing-ray bearing (x/z, y/z), not metric x-y: the
        # translation stage must stay image-aligned while remaining free to
        # slide along the ray to resolve depth.
        bearing = tau[..., :2] / tau[..., 2:3]
        prev_bearing = prev_tau[..., :2] / prev_tau[..., 2:3]
        out = out + weights.lambda_init_tau_xy * ((bearing - prev_bearing) ** 2).mean(-1)
    return out


def init_reg_loss(
    state: PersonState, prev_state: PersonState, model: BodyModel, weights: LossWeights
) -> torch.Tensor:
    """Single-person form of the drift penalty (synthesizes both bodies)."""
    verts = synthesize_vertices(model, state.beta, state.phi, state.tau, state.theta)
    prev_verts = synthesize_vertices(
        model, prev_state.beta, prev_state.phi, prev_state.tau, prev_state.theta
    )
    return init_reg_components(
        state.beta,
        state.phi,
        state.tau,
        verts,
        prev_state.beta,
        rodrigues(prev_state.phi),
        prev_state.tau,
        prev_verts,
        weights,
    )


@dataclass
class SceneObservations:
    """Stacked per-scene expert observations, ready for the objective."""

    sparse_points: torch.Tensor  # (P, K_s, 2)
    sparse_conf: torch.Tensor  # (P, K_s)
    dense_points: torch.Tensor  # (P, K_d, 2)
    dense_conf: torch.Tensor  # (P, K_d)
    shape_f: torch.Tensor  # (P, S)
    depth: torch.Tensor  # (P,)
    depth_valid: torch.Tensor  # (P,) bool

    @property
    def person_count(self) -> int:
        return self.sparse_points.shape[0]


@dataclass
class PrevReference:
    """Snapshot of the previous optimization state, precomputed once per
    stage (the vertex term would otherwise re-synthesize it every step)."""

    beta: torch.Tensor
    rot: torch.Tensor  # rodrigues(phi_prev)
    tau: torch.Tensor
    verts: torch.Tensor


def make_prev_reference(model: BodyModel, params: SceneParams) -> PrevReference:
    with torch.no_grad():
        verts = synthesize_vertices(model, params.beta, params.phi, params.tau, params.theta)
        return PrevReference(
            beta=params.beta.clone(),
            rot=rodrigues(params.phi),
            tau=params.tau.clone(),
            verts=verts,
        )


@dataclass
class TotalLoss:
    value: torch.Tensor
    terms: dict = field(default_factory=dict)  # weighted contributions + "total"
    flags: frozenset = frozenset()


def _depth_term(root_z, obs: SceneObservations, weights: LossWeights):
    if weights.depth_variant == DEPTH_AFFINE_RD:
        return affine_root_depth_loss(root_z, obs.depth, obs.depth_valid, weights.sigma_d)
    return depth_ordering_loss(root_z, obs.depth, obs.depth_valid, weights.eps_rel)


def total_loss(
    model: BodyModel,
    camera: Intrinsics,
    params: SceneParams,
    obs: SceneObservations,
    prev: PrevReference | None,
    weights: LossWeights,
    body_cache: tuple | None = None,
    with_terms: bool = False,
) -> TotalLoss:
    """Weighted scene objective over all persons jointly.

    ``body_cache`` = (vertices_at_tau0, tau0) short-circuits body synthesis
    when everything but tau is frozen; the delta form keeps vertices
    bit-identical to a fresh synthesis when tau has not moved. Leading
    batch dims on ``params`` are supported; ``with_terms`` fills the
    per-term breakdown (floats, unbatched only).
    """
    if obs.person_count != params.person_count:
        raise ConfigurationError("cue bundle and parameter block person counts differ")
    if body_cache is not None:
        verts0, tau0 = body_cache
        verts = verts0 + (params.tau - tau0).unsqueeze(-2)
    else:
        verts = synthesize_vertices(model, params.beta, params.phi, params.tau, params.theta)

    sparse3d = torch.matmul(model.sparse_kp_regressor, verts)
    dense3d = torch.matmul(model.dense_kp_regressor, verts)
    sparse2d = project(camera, sparse3d)
    dense2d = project(camera, dense3d)

    l2d = _reproj_term(sparse2d, obs.sparse_points, obs.sparse_conf, weights.sigma).mean(-1)
    ldense = _reproj_term(dense2d, obs.dense_points, obs.dense_conf, weights.sigma).mean(-1)
    lshape = shape_loss(params.beta, obs.shape_f).mean(-1)

    root_z = torch.matmul(model.joint_regressor[0:1], verts)[..., 0, 2]
    ldepth = _depth_term(root_z, obs, weights)

    if prev is not None:
        linit = init_reg_components(
            params.beta, params.phi, params.tau, verts,
            prev.beta, prev.rot, prev.tau, prev.verts, weights,
        ).mean(-1)
    else:
        linit = torch.zeros_like(lshape)

    total = (
        weights.lambda_2d * l2d
        + weights.lambda_dense * ldense
        + weights.lambda_shape * lshape
        + linit
        + weights.lambda_depth * ldepth
    )

    terms: dict = {}
    flags = set()
    if with_terms:
        terms = {
            "reproj_2d": float((weights.lambda_2d * l2d).detach()),
            "reproj_dense": float((weights.lambda_dense * ldense).detach()),
            "shape": float((weights.lambda_shape * lshape).detach()),
            "init": float(linit.detach()),
            "depth": float((weights.lambda_depth * ldepth).detach()),
            "total": float(total.detach()),
        }
        if int(obs.depth_valid.sum()) < 2:
            flags.add("depth_term_inactive")
        if obs.sparse_conf.numel() == 0 or float(obs.sparse_conf.max()) == 0.0:
            flags.add("no_confident_sparse_points")
        if obs.dense_conf.numel() == 0 or float(obs.dense_conf.max()) == 0.0:
            flags.add("no_confident_dense_points")
    return TotalLoss(value=total, terms=terms, flags=frozenset(flags))


class SceneObjective:
    """Callable objective over SceneParams; supports batched evaluation.

    ``terms=True`` makes it return the stacked weighted term vector
    (reproj_2d, reproj_dense, shape, init, depth, total) instead of the
    scalar total, sharing one body synthesis across all components.
    """

    supports_batch = True

    def __init__(self, model, camera, obs, prev, weights, terms=False):
        self.model = model
        self.camera = camera
        self.obs = obs
        self.prev = prev
        self.weights = weights
        self.terms = terms

    def __call__(self, params: SceneParams) -> torch.Tensor:
        w = self.weights
        if not self.terms:
            return total_loss(self.model, self.camera, params, self.obs, self.prev, w).value
        parts = []
        verts = synthesize_vertices(self.model, params.beta, params.phi, params.tau, params.theta)
        sparse2d = project(self.camera, torch.matmul(self.model.sparse_kp_regressor, verts))
        dense2d = project(self.camera, torch.matmul(self.model.dense_kp_regressor, verts))
        parts.append(w.lambda_2d * _reproj_term(sparse2d, self.obs.sparse_points, self.obs.sparse_conf, w.sigma).mean(-1))
        parts.append(w.lambda_dense * _reproj_term(dense2d, self.obs.dense_points, self.obs.dense_conf, w.sigma).mean(-1))
        parts.append(w.lambda_shape * shape_loss(params.beta, self.obs.shape_f).mean(-1))
        if self.prev is not None:
            parts.append(
                init_reg_components(
                    params.beta, params.phi, params.tau, verts,
                    self.prev.beta, self.prev.rot, self.prev.tau, self.prev.verts, w,
                ).mean(-1)
            )
        else:
            parts.append(torch.zeros_like(parts[-1]))
        root_z = torch.matmul(self.model.joint_regressor[0:1], verts)[..., 0, 2]
        parts.append(w.lambda_depth * _depth_term(root_z, self.obs, w))
        parts.append(sum(parts))
        return torch.stack(parts, dim=-1)


def replace_weights(weights: LossWeights, **kwargs) -> LossWeights:
    return replace(weights, **kwargs)
