"""Evaluation metrics: 2D keypoint accuracy, depth relations, 3D errors,
attribute classification, detection, and the pseudo-ground-truth filter."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

MISSED = "missed"  # reserved prediction label for undetected persons


@dataclass
class MetricReport:
    mpckh: float
    pcdr_overall: float
    pcdr_per_class: dict
    mpjpe_root: float  # mm
    mpjpe_joint_pa: float  # mm
    pck3d_15cm: float
    age_f1: float
    gender_f1: float
    detection_f1: float
    counts: dict = field(default_factory=dict)

    def rows(self):
        """Flat (metric, class, value, count) rows for CSV export."""
        out = [
            ("mpckh", "", self.mpckh, self.counts.get("scenes", 0)),
            ("pcdr", "overall", self.pcdr_overall, self.counts.get("pairs", 0)),
        ]
        for cls, val in sorted(self.pcdr_per_class.items()):
            out.append(("pcdr", cls, val, self.counts.get(f"pairs_{cls}", 0)))
        out += [
            ("mpjpe_root", "", self.mpjpe_root, self.counts.get("matched_joints", 0)),
            ("mpjpe_joint_pa", "", self.mpjpe_joint_pa, self.counts.get("matched_joints", 0)),
            ("pck3d_15cm", "", self.pck3d_15cm, self.counts.get("joints", 0)),
            ("age_f1", "", self.age_f1, self.counts.get("persons", 0)),
            ("gender_f1", "", self.gender_f1, self.counts.get("persons", 0)),
            ("detection_f1", "", self.detection_f1, self.counts.get("gt_boxes", 0)),
        ]
        return out


def mpckh(
    pred2d: list,
    gt2d: list,
    gt_head_lengths: np.ndarray,
    thr: float = 0.6,
    matched_flags: list | None = None,
) -> float:
    """Scene-level mean PCKh (percent): keypoint correct iff its pixel error
    is below thr * head length. Unmatched persons count all-incorrect;
    persons with zero head length are excluded with a warning."""
    n = len(gt2d)
    if matched_flags is None:
        matched_flags = [p is not None for p in pred2d]
    per_person = []
    for i in range(n):
        head = float(gt_head_lengths[i])
        if head <= 0:
            warnings.warn(f"person {i} has non-positive head length; excluded from mPCKh")
            continue
        if not matched_flags[i] or pred2d[i] is None:
            per_person.append(0.0)
            continue
        err = np.linalg.norm(np.asarray(pred2d[i]) - np.asarray(gt2d[i]), axis=-1)
        per_person.append(float(np.mean(err < thr * head) * 100.0))
    return float(np.mean(per_person)) if per_person else 0.0


def _depth_relation(dz: float, delta: float) -> int:
    if abs(dz) <= delta:
        return 0
    return 1 if dz > 0 else -1


@dataclass
class PcdrResult:
    overall: float
    per_class: dict
    correct: int
    total: int
    class_counts: dict = field(default_factory=dict)  # class -> (correct, total)


def pcdr(
    pred_root_z: np.ndarray,
    gt_root_z: np.ndarray,
    delta: float = 0.2,
    age_classes: list | None = None,
    matched_flags: list | None = None,
) -> PcdrResult | None:
    """Percentage of correct pairwise depth relations (nearer / equal within
    delta / farther). Pairs touching an unmatched person are incorrect.
    Scenes with fewer than two persons have no defined value (None)."""
    gt = np.asarray(gt_root_z, dtype=np.float64)
    n = gt.shape[0]
    if n < 2:
        return None
    if matched_flags is None:
        matched_flags = [True] * n
    per_class: dict = {}
    correct = total = 0
    for i in range(n):
        for j in range(i + 1, n):
            gt_rel = _depth_relation(gt[i] - gt[j], delta)
            ok = False
            if matched_flags[i] and matched_flags[j]:
                pr = _depth_relation(float(pred_root_z[i]) - float(pred_root_z[j]), delta)
                ok = pr == gt_rel
            correct += ok
            total += 1
            if age_classes is not None:
                for cls in {age_classes[i], age_classes[j]}:
                    c, t = per_class.get(cls, (0, 0))
                    per_class[cls] = (c + ok, t + 1)
    return PcdrResult(
        overall=100.0 * correct / total,
        per_class={k: 100.0 * c / t for k, (c, t) in per_class.items()},
        correct=correct,
        total=total,
        class_counts=per_class,
    )


def mpjpe_root(pred_joints: list, gt_joints: list) -> float:
    """Root-aligned MPJPE in mm over matched persons (joint 0 is the root)."""
    errs = []
    for p, g in zip(pred_joints, gt_joints):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        err = np.linalg.norm((p - p[0]) - (g - g[0]), axis=-1)
        errs.append(err)
    if not errs:
        return float("nan")
    return float(np.concatenate(errs).mean() * 1000.0)


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity transform (s, R, t) minimizing ||s R src + t - dst||^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape[0] < 3:
        raise ConfigurationError("similarity alignment needs >= 3 points")
    mu_s = src.mean(0)
    mu_d = dst.mean(0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    u, d, vt = np.linalg.svd(cov)
    sgn = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2, 2] = -1.0
    rot = u @ sgn @ vt
    if with_scale:
        var_s = (xs ** 2).sum() / src.shape[0]
        scale = float(np.trace(np.diag(d) @ sgn) / var_s)
    else:
        scale = 1.0
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def mpjpe_joint_pa(pred_joints: list, gt_joints: list, with_scale: bool = True) -> float:
    """MPJPE (mm) after a single similarity alignment fitted over the
    concatenation of all matched persons' joints."""
    if not pred_joints:
        return float("nan")
    pred = np.concatenate([np.asarray(p, dtype=np.float64) for p in pred_joints])
    gt = np.concatenate([np.asarray(g, dtype=np.float64) for g in gt_joints])
    if pred.shape[0] <= 2:
        raise ConfigurationError("joint-PA needs more than 2 joints")
    s, r, t = umeyama_alignment(pred, gt, with_scale=with_scale)
    aligned = s * pred @ r.T + t
    return float(np.linalg.norm(aligned - gt, axis=-1).mean() * 1000.0)


def pck3d(
    pred_joints: list,
    gt_joints: list,
    thr: float = 0.15,
    matched_flags: list | None = None,
) -> float:
    """Percent of joints within thr meters (camera frame); unmatched
    persons' joints all count incorrect."""
    if matched_flags is None:
        matched_flags = [p is not None for p in pred_joints]
    hits = []
    for i, g in enumerate(gt_joints):
        g = np.asarray(g, dtype=np.float64)
        if not matched_flags[i] or pred_joints[i] is None:
            hits.append(np.zeros(g.shape[0], dtype=bool))
            continue
        err = np.linalg.norm(np.asarray(pred_joints[i]) - g, axis=-1)
        hits.append(err < thr)
    if not hits:
        return 0.0
    return float(np.concatenate(hits).mean() * 100.0)


def attribute_f1(pred_labels: list, gt_labels: list, classes: list):
    """Macro F1 over classes present in the ground truth, plus the confusion
    matrix as {(gt, pred): count}. Unmatched persons must carry the reserved
    'missed' prediction (a false negative for their class)."""
    confusion: dict = {}
    for p, g in zip(pred_labels, gt_labels):
        confusion[(g, p)] = confusion.get((g, p), 0) + 1
    present = [c for c in classes if any(g == c for g in gt_labels)]
    f1s = []
    for c in present:
        tp = confusion.get((c, c), 0)
        fp = sum(v for (g, p), v in confusion.items() if p == c and g != c)
        fn = sum(v for (g, p), v in confusion.items() if g == c and p != c)
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    macro = float(np.mean(f1s)) if f1s else 0.0
    return macro, confusion


def _iou(a, b) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter <= 0:
        return 0.0
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / area


def detection_f1(
    pred_boxes: list, gt_boxes: list, iou_thr: float = 0.5, pred_conf: list | None = None
):
    """Greedy IoU matching in descending confidence order (index order when
    uniform). Returns (f1, tp, fp, fn)."""
    order = list(range(len(pred_boxes)))
    if pred_conf is not None:
        order.sort(key=lambda i: (-pred_conf[i], i))
    taken = [False] * len(gt_boxes)
    tp = 0
    for i in order:
        best, best_iou = None, iou_thr
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = _iou(pred_boxes[i], g)
            if v >= best_iou:
                best, best_iou = j, v
        if best is not None:
            taken[best] = True
            tp += 1
    fp = len(pred_boxes) - tp
    fn = len(gt_boxes) - tp
    denom = 2 * tp + fp + fn
    return (2 * tp / denom if denom > 0 else 0.0), tp, fp, fn


def percentile_filter(per_scene_errors: dict, lo: float = 3.0, hi: float = 95.0) -> list:
    """Keep scene ids whose error lies within the nearest-rank [lo, hi]
    percentiles (inclusive)."""
    if not per_scene_errors:
        raise ConfigurationError("percentile_filter needs at least one scene")
    ids = list(per_scene_errors.keys())
    errors = np.asarray([per_scene_errors[i] for i in ids], dtype=np.float64)
    srt = np.sort(errors)
    n = srt.shape[0]

    def nearest_rank(p):
        if p <= 0:
            return srt[0]
        k = int(np.ceil(p / 100.0 * n))
        return srt[min(max(k, 1), n) - 1]

    lo_val, hi_val = nearest_rank(lo), nearest_rank(hi)
    return [i for i, e in zip(ids, errors) if lo_val <= e <= hi_val]
