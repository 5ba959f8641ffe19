"""Ground-truth scene generation and simulated expert cues.

Stands in for the expert networks (keypoint estimator, metric depth,
segmentation, attribute classifier): cues are synthesized from ground truth
with configurable noise. A zero-noise config reproduces ground truth exactly,
so every loss term vanishes at the true parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .body_model import (
    AGE_DIM,
    DTYPE,
    HEIGHT_DIM,
    BodyModel,
    PersonState,
    synthesize_vertices,
)
from .camera import Intrinsics
from .errors import ConfigurationError, PlacementError
from .losses import DepthCue, Observed2D, SceneObservations
from .semantic_shape import (
    AttributeCatalog,
    ShapeEstimate,
    build_estimate,
    classify_beta,
    default_catalog,
    exact_estimate,
)

ATTRIBUTE_EXACT = "exact"
ATTRIBUTE_LABELS = "labels"

DEPTH_FROM_ROOT = "root"
DEPTH_FROM_VERTEX_MEDIAN = "vertex_median"


@dataclass
class PlacementConfig:
    z_range: tuple = (1.5, 12.0)
    margin_px: float = 30.0
    max_retries: int = 300
    beta_ranges: dict | None = None  # dim -> (lo, hi) overrides
    theta_scale: float = 0.3  # uniform joint-angle bound, radians
    phi_scale: float = 0.2
    age_stratified: bool = False
    box_iou_max: float = 0.45


@dataclass
class NoiseConfig:
    kp_pixel_sigma: float = 0.0
    kp_dropout_prob: float = 0.0
    conf_decay_px: float = 20.0
    depth_mult_sigma: float = 0.0  # lognormal multiplier on the depth cue
    depth_source: str = DEPTH_FROM_ROOT
    attribute_mode: str = ATTRIBUTE_EXACT
    confusion: dict | None = None  # attribute -> row-stochastic matrix (catalog label order)
    detection_miss_prob: float = 0.0
    init_tau_xy_sigma: float = 0.0
    init_tau_z_sigma: float = 0.0
    init_beta_sigma: float = 0.0
    init_phi_sigma: float = 0.0
    init_theta_sigma: float = 0.0
    init_depth_scale: float | None = None  # depth-scale confusion factor s

    def __post_init__(self):
        for name in ("kp_dropout_prob", "detection_miss_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.attribute_mode not in (ATTRIBUTE_EXACT, ATTRIBUTE_LABELS):
            raise ConfigurationError(f"unknown attribute_mode {self.attribute_mode!r}")
        if self.depth_source not in (DEPTH_FROM_ROOT, DEPTH_FROM_VERTEX_MEDIAN):
            raise ConfigurationError(f"unknown depth_source {self.depth_source!r}")
        if self.confusion is not None:
            for attr, mat in self.confusion.items():
                m = np.asarray(mat, dtype=np.float64)
                if m.ndim != 2 or m.shape[0] != m.shape[1]:
                    raise ConfigurationError(f"confusion matrix for {attr!r} must be square")
                if np.any(m < 0) or np.max(np.abs(m.sum(1) - 1.0)) > 1e-9:
                    raise ConfigurationError(f"confusion rows for {attr!r} must sum to 1")

    def to_dict(self) -> dict:
        d = {
            "kp_pixel_sigma": self.kp_pixel_sigma,
            "kp_dropout_prob": self.kp_dropout_prob,
            "conf_decay_px": self.conf_decay_px,
            "depth_mult_sigma": self.depth_mult_sigma,
            "depth_source": self.depth_source,
            "attribute_mode": self.attribute_mode,
            "detection_miss_prob": self.detection_miss_prob,
            "init_tau_xy_sigma": self.init_tau_xy_sigma,
            "init_tau_z_sigma": self.init_tau_z_sigma,
            "init_beta_sigma": self.init_beta_sigma,
            "init_phi_sigma": self.init_phi_sigma,
            "init_theta_sigma": self.init_theta_sigma,
            "init_depth_scale": self.init_depth_scale,
        }
        if self.confusion is not None:
            d["confusion"] = {k: np.asarray(v).tolist() for k, v in self.confusion.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        return cls(**d)


@dataclass
class PersonTruth:
    state: PersonState
    labels: dict  # attribute -> label


@dataclass
class GroundTruthScene:
    scene_id: str
    seed: int
    camera: Intrinsics
    persons: list


@dataclass
class Detection:
    box: np.ndarray  # (4,) x0, y0, x1, y1 pixels
    present: bool = True


@dataclass
class PersonCues:
    sparse: Observed2D
    dense: Observed2D
    shape_estimate: ShapeEstimate
    depth: DepthCue
    detection: Detection


@dataclass
class SceneCues:
    persons: list

    def observations(self, indices=None) -> SceneObservations:
        """Stack (a subset of) per-person cues for the objective."""
        sel = list(range(len(self.persons))) if indices is None else list(indices)
        pc = [self.persons[i] for i in sel]
        t = lambda arrs: torch.tensor(np.stack(arrs), dtype=DTYPE)  # noqa: E731
        return SceneObservations(
            sparse_points=t([c.sparse.points for c in pc]),
            sparse_conf=t([c.sparse.confidences for c in pc]),
            dense_points=t([c.dense.points for c in pc]),
            dense_conf=t([c.dense.confidences for c in pc]),
            shape_f=t([c.shape_estimate.f for c in pc]),
            depth=torch.tensor([c.depth.value for c in pc], dtype=DTYPE),
            depth_valid=torch.tensor([c.depth.valid for c in pc], dtype=torch.bool),
        )


def _stature_np(model: BodyModel, beta: np.ndarray) -> float:
    ages = model.stature_ages.numpy()
    vals = model.stature_values.numpy()
    base = float(np.interp(np.clip(beta[AGE_DIM], ages[0], ages[-1]), ages, vals))
    return base * (1.0 + model.height_span * (beta[HEIGHT_DIM] - 0.5))


def _synth_np(model: BodyModel, state: PersonState) -> np.ndarray:
    with torch.no_grad():
        return synthesize_vertices(model, state.beta, state.phi, state.tau, state.theta).numpy()


def _project_np(camera: Intrinsics, pts: np.ndarray) -> np.ndarray:
    z = pts[..., 2]
    return np.stack(
        [camera.fx * pts[..., 0] / z + camera.cx, camera.fy * pts[..., 1] / z + camera.cy], -1
    )


def _bbox(pts2d: np.ndarray, camera: Intrinsics) -> np.ndarray:
    x0, y0 = pts2d.min(0)
    x1, y1 = pts2d.max(0)
    return np.array(
        [
            max(0.0, x0),
            max(0.0, y0),
            min(float(camera.width), x1),
            min(float(camera.height), y1),
        ]
    )


def _box_iou(a: np.ndarray, b: np.ndarray) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter) if inter > 0 else 0.0


def _age_class_cells(catalog: AttributeCatalog):
    anchors = catalog.attributes["age"]
    vals = [a.values[AGE_DIM] for a in anchors]
    cells = []
    for i, v in enumerate(vals):
        lo = 0.0 if i == 0 else 0.5 * (vals[i - 1] + v)
        hi = 1.0 if i == len(vals) - 1 else 0.5 * (v + vals[i + 1])
        cells.append((lo, hi))
    return cells


def sample_scene(
    model: BodyModel,
    camera: Intrinsics,
    n_persons: int,
    rng_seed: int,
    placement: PlacementConfig | None = None,
    catalog: AttributeCatalog | None = None,
    scene_id: str | None = None,
) -> GroundTruthScene:
    """Sample a ground-truth multi-person scene; deterministic per seed."""
    if n_persons < 1:
        raise ConfigurationError("n_persons must be >= 1")
    placement = placement or PlacementConfig()
    catalog = catalog or default_catalog(model.config.shape_dim)
    rng = np.random.default_rng(rng_seed)
    cells = _age_class_cells(catalog) if placement.age_stratified else None

    persons: list[PersonTruth] = []
    boxes: list[np.ndarray] = []
    s = model.config.shape_dim
    j1 = model.config.joint_count - 1
    if 2 * placement.margin_px >= min(camera.width, camera.height):
        raise PlacementError("visibility margin leaves no image area to place persons")
    cell_offset = int(rng.integers(0, len(cells))) if cells is not None else 0
    for i in range(n_persons):
        placed = False
        for _ in range(placement.max_retries):
            beta = rng.uniform(0.0, 1.0, s)
            if cells is not None:
                lo, hi = cells[(cell_offset + i) % len(cells)]
                beta[AGE_DIM] = rng.uniform(lo, hi)
            if placement.beta_ranges:
                for dim, (lo, hi) in placement.beta_ranges.items():
                    beta[dim] = rng.uniform(lo, hi)
            theta = rng.uniform(-placement.theta_scale, placement.theta_scale, (j1, 3))
            phi = rng.uniform(-placement.phi_scale, placement.phi_scale, 3)
            z = rng.uniform(*placement.z_range)
            m = placement.margin_px
            u = rng.uniform(m, camera.width - m)
            v = rng.uniform(m, camera.height - m)
            tau = np.array([(u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z])
            state = PersonState(beta=beta, phi=phi, tau=tau, theta=theta)
            verts2d = _project_np(camera, _synth_np(model, state))
            if (
                verts2d[:, 0].min() < 0
                or verts2d[:, 1].min() < 0
                or verts2d[:, 0].max() > camera.width
                or verts2d[:, 1].max() > camera.height
            ):
                continue
            box = _bbox(verts2d, camera)
            if any(_box_iou(box, other) > placement.box_iou_max for other in boxes):
                continue
            labels = classify_beta(catalog, beta)
            persons.append(
                PersonTruth(state=state, labels={"age": labels["age"], "gender": labels["gender"]})
            )
            boxes.append(box)
            placed = True
            break
        if not placed:
            raise PlacementError(f"could not place person {i} after {placement.max_retries} tries")
    return GroundTruthScene(
        scene_id=scene_id or f"scene_{rng_seed}",
        seed=rng_seed,
        camera=camera,
        persons=persons,
    )


def derive_cues(
    model: BodyModel,
    scene: GroundTruthScene,
    noise: NoiseConfig,
    rng_seed: int,
    catalog: AttributeCatalog | None = None,
) -> SceneCues:
    """Simulate the expert outputs for one scene; deterministic per seed."""
    catalog = catalog or default_catalog(model.config.shape_dim)
    rng = np.random.default_rng(rng_seed)
    out: list[PersonCues] = []

    # Project through the same batched tensor path the objective uses, so a
    # zero-noise configuration reproduces the loss inputs bit-exactly and
    # ground truth is a true stationary point of the objective.
    from .body_model import SceneParams
    from .camera import project

    params = SceneParams.from_states([p.state for p in scene.persons])
    with torch.no_grad():
        verts = synthesize_vertices(model, params.beta, params.phi, params.tau, params.theta)
        sparse2d_all = project(scene.camera, torch.matmul(model.sparse_kp_regressor, verts)).numpy()
        dense2d_all = project(scene.camera, torch.matmul(model.dense_kp_regressor, verts)).numpy()
        root_z_all = torch.matmul(model.joint_regressor[0:1], verts)[..., 0, 2].numpy()
    verts_np = verts.numpy()

    for pi, person in enumerate(scene.persons):

        def observe(pts):
            n = rng.standard_normal(pts.shape) * noise.kp_pixel_sigma
            dropped = rng.random(pts.shape[0]) < noise.kp_dropout_prob
            conf = np.exp(-np.linalg.norm(n, axis=-1) / noise.conf_decay_px)
            conf[dropped] = 0.0
            return Observed2D(points=pts + n, confidences=np.clip(conf, 0.0, 1.0))

        sparse = observe(sparse2d_all[pi])
        dense = observe(dense2d_all[pi])

        if noise.depth_source == DEPTH_FROM_VERTEX_MEDIAN:
            ref_depth = float(np.median(verts_np[pi, :, 2]))
        else:
            ref_depth = float(root_z_all[pi])
        mult = float(np.exp(noise.depth_mult_sigma * rng.standard_normal()))
        depth = DepthCue(value=ref_depth * mult, valid=True)

        if noise.attribute_mode == ATTRIBUTE_EXACT:
            estimate = exact_estimate(person.state.beta.numpy())
        else:
            observed_labels = {}
            for attr in ("age", "gender"):
                labels = catalog.labels_of(attr)
                gt_label = person.labels.get(attr)
                if gt_label is None:
                    continue
                row = None
                if noise.confusion and attr in noise.confusion:
                    row = np.asarray(noise.confusion[attr], dtype=np.float64)[labels.index(gt_label)]
                if row is None:
                    observed_labels[attr] = gt_label
                else:
                    observed_labels[attr] = labels[int(rng.choice(len(labels), p=row))]
            estimate = build_estimate(catalog, observed_labels)

        verts2d = _project_np(scene.camera, verts_np[pi])
        present = bool(rng.random() >= noise.detection_miss_prob)
        out.append(
            PersonCues(
                sparse=sparse,
                dense=dense,
                shape_estimate=estimate,
                depth=depth,
                detection=Detection(box=_bbox(verts2d, scene.camera), present=present),
            )
        )
    return SceneCues(persons=out)


def _apply_depth_scale_confusion(
    model: BodyModel, beta: np.ndarray, tau: np.ndarray, s: float
) -> tuple[np.ndarray, np.ndarray]:
    """Scale a person's distance by ~s while age/height-shifting beta so the
    projected silhouette stays (approximately) unchanged.

    The achievable scale saturates at the tallest representable body; tau is
    scaled about the camera origin by the achieved ratio.
    """
    ages = model.stature_ages.numpy()
    vals = model.stature_values.numpy()
    peak = int(np.argmax(vals))
    inc_ages, inc_vals = ages[: peak + 1], vals[: peak + 1]
    span = model.height_span

    current = _stature_np(model, beta)
    target = s * current
    height_mult = 1.0 + span * (beta[HEIGHT_DIM] - 0.5)

    base_target = np.clip(target / height_mult, inc_vals[0], inc_vals[-1])
    new_age = float(np.interp(base_target, inc_vals, inc_ages))
    base_val = float(np.interp(new_age, ages, vals))
    new_mult = np.clip(target / base_val, 1.0 - span / 2.0, 1.0 + span / 2.0)
    new_height = float((new_mult - 1.0) / span + 0.5)

    new_beta = beta.copy()
    new_beta[AGE_DIM] = new_age
    new_beta[HEIGHT_DIM] = new_height
    s_eff = _stature_np(model, new_beta) / current
    return new_beta, tau * s_eff


def perturb_init(
    model: BodyModel, scene: GroundTruthScene, noise: NoiseConfig, rng_seed: int
) -> list:
    """Simulated feedforward initialization: GT plus per-block perturbations.

    ``init_depth_scale`` enables the depth-scale confusion mode (the classic
    near-child / far-adult ambiguity construction)."""
    rng = np.random.default_rng(rng_seed)
    states: list[PersonState] = []
    for person in scene.persons:
        beta = person.state.beta.numpy().copy()
        phi = person.state.phi.numpy().copy()
        tau = person.state.tau.numpy().copy()
        theta = person.state.theta.numpy().copy()

        if noise.init_depth_scale is not None:
            beta, tau = _apply_depth_scale_confusion(model, beta, tau, noise.init_depth_scale)

        beta = np.clip(beta + rng.standard_normal(beta.shape) * noise.init_beta_sigma, 0.0, 1.0)
        phi = phi + rng.standard_normal(3) * noise.init_phi_sigma
        theta = theta + rng.standard_normal(theta.shape) * noise.init_theta_sigma
        tau[:2] = tau[:2] + rng.standard_normal(2) * noise.init_tau_xy_sigma
        tau[2] = max(0.6, tau[2] + rng.standard_normal() * noise.init_tau_z_sigma)
        states.append(PersonState(beta=beta, phi=phi, tau=tau, theta=theta))
    return states


def apply_shape_estimate_init(states: list, cues: SceneCues) -> list:
    """Seed each person's shape from the attribute estimate F.

    The estimate is used both at initialization and through the shape loss;
    only dimensions the estimator actually provided are overridden. Returns
    new states (inputs untouched); None entries pass through.
    """
    out = []
    for state, cue in zip(states, cues.persons):
        if state is None:
            out.append(None)
            continue
        est = cue.shape_estimate
        beta = state.beta.clone()
        provided = np.asarray(est.provided, dtype=bool)
        beta[torch.tensor(provided)] = torch.tensor(est.f[provided], dtype=DTYPE)
        out.append(PersonState(beta=beta, phi=state.phi.clone(), tau=state.tau.clone(), theta=state.theta.clone()))
    return out


@dataclass
class MatchResult:
    assignment: list  # per detection: prediction index or None
    recovered: list  # per detection: True when the fallback rule fired


def match_detections(pred_noses: np.ndarray, det_boxes: np.ndarray) -> MatchResult:
    """Mutual-best matching of predicted nose points to detection boxes.

    Mutual nearest pairs are matched first; detections left over take the
    closest prediction (preferring unmatched ones, falling back to reuse)
    and are flagged as recovered. Ties break toward lower indices.
    """
    pred = np.asarray(pred_noses, dtype=np.float64).reshape(-1, 2)
    boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    m, n = boxes.shape[0], pred.shape[0]
    assignment: list = [None] * m
    recovered = [False] * m
    if m == 0 or n == 0:
        return MatchResult(assignment, recovered)

    centers = np.stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2], -1)
    dist = np.linalg.norm(centers[:, None, :] - pred[None, :, :], axis=-1)
    det_best = dist.argmin(1)
    pred_best = dist.argmin(0)
    used = set()
    for det in range(m):
        p = int(det_best[det])
        if int(pred_best[p]) == det:
            assignment[det] = p
            used.add(p)

    unassigned = [det for det in range(m) if assignment[det] is None]
    while unassigned:
        remaining = [p for p in range(n) if p not in used]
        pool = remaining if remaining else list(range(n))
        _, det, p = min((dist[d, q], d, q) for d in unassigned for q in pool)
        assignment[det] = p
        recovered[det] = True
        used.add(p)
        unassigned.remove(det)
    return MatchResult(assignment, recovered)
