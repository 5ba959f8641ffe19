"""Scene- and suite-level evaluation of predicted states against ground truth.

Predicted persons are matched to ground-truth persons by mutual-best nose
distance (the same mechanism used to recover lost detections), then every
metric is pooled over the suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .body_model import HEAD_TOP_KP, NECK_KP, BodyModel, PersonState, synthesize_vertices
from .camera import Intrinsics
from .metrics import (
    MISSED,
    MetricReport,
    attribute_f1,
    detection_f1,
    mpckh,
    mpjpe_joint_pa,
    mpjpe_root,
    pcdr,
    pck3d,
)
from .semantic_shape import AttributeCatalog, classify_beta, default_catalog
from .synth import GroundTruthScene, SceneCues, _project_np, _synth_np, match_detections


@dataclass
class _PersonView:
    joints3d: np.ndarray
    sparse2d: np.ndarray
    root_z: float
    labels: dict


def _view(model: BodyModel, camera: Intrinsics, state: PersonState, catalog: AttributeCatalog) -> _PersonView:
    verts = _synth_np(model, state)
    joints = model.joint_regressor.numpy() @ verts
    sparse3d = model.sparse_kp_regressor.numpy() @ verts
    sparse2d = _project_np(camera, sparse3d)
    return _PersonView(
        joints3d=joints,
        sparse2d=sparse2d,
        root_z=float(joints[0, 2]),
        labels=classify_beta(catalog, state.beta.numpy()),
    )


def _dedupe_assignment(assignment, dist_fn):
    """A prediction reused across detections keeps only its closest one."""
    by_pred: dict = {}
    for det, p in enumerate(assignment):
        if p is None:
            continue
        by_pred.setdefault(p, []).append(det)
    out = [None] * len(assignment)
    for p, dets in by_pred.items():
        keep = min(dets, key=lambda d: dist_fn(d, p))
        out[keep] = p
    return out


def evaluate_suite(
    model: BodyModel,
    camera: Intrinsics,
    scenes: list,
    cues_list: list,
    preds_list: list,
    catalog: AttributeCatalog | None = None,
    pa_with_scale: bool = True,
):
    """Pooled metrics over a suite.

    preds_list[i] is the list of predicted PersonStates for scene i (entries
    may be None for persons that were never predicted). Returns
    (MetricReport, confusion dict per attribute)."""
    catalog = catalog or default_catalog(model.config.shape_dim)
    j_count = model.config.joint_count

    mpckh_scenes = []
    pair_correct = pair_total = 0
    class_counts: dict = {}
    root_err_sum = 0.0
    pa_err_sum = 0.0
    matched_joints = 0
    pck_hits = 0
    joints_total = 0
    labels_pool = {"age": ([], []), "gender": ([], [])}  # (pred, gt)
    det_tp = det_fp = det_fn = 0
    persons_total = 0

    for scene, cues, preds in zip(scenes, cues_list, preds_list):
        gt_views = [_view(model, camera, p.state, catalog) for p in scene.persons]
        n_gt = len(gt_views)
        persons_total += n_gt

        pred_states = [s for s in preds if s is not None]
        pred_views = [_view(model, camera, s, catalog) for s in pred_states]

        # Mutual-best nose matching against head boxes around the GT noses.
        head_lens = np.array(
            [
                float(np.linalg.norm(v.sparse2d[HEAD_TOP_KP] - v.sparse2d[NECK_KP]))
                for v in gt_views
            ]
        )
        if pred_views:
            noses = np.stack([v.sparse2d[0] for v in pred_views])
            boxes = []
            for v, hl in zip(gt_views, head_lens):
                cx, cy = v.sparse2d[0]
                r = max(2.0, 0.6 * hl)
                boxes.append([cx - r, cy - r, cx + r, cy + r])
            match = match_detections(noses, np.asarray(boxes))
            dist = lambda det, p: float(  # noqa: E731
                np.linalg.norm(gt_views[det].sparse2d[0] - pred_views[p].sparse2d[0])
            )
            assignment = _dedupe_assignment(match.assignment, dist)
        else:
            assignment = [None] * n_gt

        matched = [a is not None for a in assignment]
        pred2d = [pred_views[a].sparse2d if a is not None else None for a in assignment]
        gt2d = [v.sparse2d for v in gt_views]
        mpckh_scenes.append(mpckh(pred2d, gt2d, head_lens, thr=0.6, matched_flags=matched))

        gt_z = np.array([v.root_z for v in gt_views])
        pred_z = np.array([pred_views[a].root_z if a is not None else 0.0 for a in assignment])
        ages = [p.labels["age"] for p in scene.persons]
        res = pcdr(pred_z, gt_z, delta=0.2, age_classes=ages, matched_flags=matched)
        if res is not None:
            pair_correct += res.correct
            pair_total += res.total
            for cls, (c, t) in res.class_counts.items():
                c0, t0 = class_counts.get(cls, (0, 0))
                class_counts[cls] = (c0 + c, t0 + t)

        matched_pred_joints = [pred_views[a].joints3d for a in assignment if a is not None]
        matched_gt_joints = [v.joints3d for v, a in zip(gt_views, assignment) if a is not None]
        if matched_pred_joints:
            nj = len(matched_pred_joints) * j_count
            root_err_sum += mpjpe_root(matched_pred_joints, matched_gt_joints) * nj
            pa_err_sum += (
                mpjpe_joint_pa(matched_pred_joints, matched_gt_joints, with_scale=pa_with_scale) * nj
            )
            matched_joints += nj
        pred_joints_aligned = [
            pred_views[a].joints3d if a is not None else None for a in assignment
        ]
        scene_pck = pck3d(pred_joints_aligned, [v.joints3d for v in gt_views], matched_flags=matched)
        pck_hits += scene_pck / 100.0 * n_gt * j_count
        joints_total += n_gt * j_count

        for attr in ("age", "gender"):
            pred_l, gt_l = labels_pool[attr]
            for person, a in zip(scene.persons, assignment):
                gt_l.append(person.labels[attr])
                pred_l.append(pred_views[a].labels[attr] if a is not None else MISSED)

        gt_boxes = []
        for p in scene.persons:
            v2 = _project_np(camera, _synth_np(model, p.state))
            gt_boxes.append(
                [max(0, v2[:, 0].min()), max(0, v2[:, 1].min()), min(camera.width, v2[:, 0].max()), min(camera.height, v2[:, 1].max())]
            )
        det_boxes = [c.detection.box for c in cues.persons if c.detection.present]
        _, tp, fp, fn = detection_f1(det_boxes, gt_boxes)
        det_tp, det_fp, det_fn = det_tp + tp, det_fp + fp, det_fn + fn

    confusions = {}
    f1s = {}
    for attr in ("age", "gender"):
        pred_l, gt_l = labels_pool[attr]
        classes = list(catalog.labels_of(attr))
        f1s[attr], confusions[attr] = attribute_f1(pred_l, gt_l, classes)

    det_denom = 2 * det_tp + det_fp + det_fn
    report = MetricReport(
        mpckh=float(np.mean(mpckh_scenes)) if mpckh_scenes else 0.0,
        pcdr_overall=100.0 * pair_correct / pair_total if pair_total else float("nan"),
        pcdr_per_class={k: 100.0 * c / t for k, (c, t) in class_counts.items()},
        mpjpe_root=root_err_sum / matched_joints if matched_joints else float("nan"),
        mpjpe_joint_pa=pa_err_sum / matched_joints if matched_joints else float("nan"),
        pck3d_15cm=100.0 * pck_hits / joints_total if joints_total else 0.0,
        age_f1=f1s["age"],
        gender_f1=f1s["gender"],
        detection_f1=2 * det_tp / det_denom if det_denom else 0.0,
        counts={
            "scenes": len(scenes),
            "persons": persons_total,
            "pairs": pair_total,
            "matched_joints": matched_joints,
            "joints": joints_total,
            "gt_boxes": det_fn + det_tp,
            **{f"pairs_{k}": t for k, (c, t) in class_counts.items()},
        },
    )
    return report, confusions
