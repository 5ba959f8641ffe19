import numpy as np
import pytest

from camfit.errors import ConfigurationError
from camfit.metrics import (
    MISSED,
    attribute_f1,
    detection_f1,
    mpckh,
    mpjpe_joint_pa,
    mpjpe_root,
    pcdr,
    pck3d,
    percentile_filter,
    umeyama_alignment,
)


class TestMpckh:
    def test_perfect(self, rng):
        gt = [rng.uniform(0, 640, (17, 2)) for _ in range(3)]
        assert mpckh([g.copy() for g in gt], gt, np.full(3, 50.0)) == 100.0

    def test_all_unmatched_zero(self, rng):
        gt = [rng.uniform(0, 640, (17, 2)) for _ in range(3)]
        assert mpckh([None] * 3, gt, np.full(3, 50.0)) == 0.0

    def test_threshold_arithmetic(self):
        gt = [np.zeros((10, 2))]
        pred = np.zeros((10, 2))
        pred[:5, 0] = 50.0  # below 0.6 * 100 = 60 -> correct
        pred[5:, 0] = 70.0  # above -> incorrect
        assert mpckh([pred], gt, np.array([100.0])) == 50.0

    def test_zero_head_length_excluded(self, rng):
        gt = [np.zeros((5, 2)), rng.uniform(0, 10, (5, 2))]
        preds = [g.copy() for g in gt]
        with pytest.warns(UserWarning):
            val = mpckh(preds, gt, np.array([0.0, 40.0]))
        assert val == 100.0

    def test_keypoint_permutation_invariance(self, rng):
        gt = rng.uniform(0, 640, (17, 2))
        pred = gt + rng.standard_normal((17, 2)) * 30
        perm = rng.permutation(17)
        a = mpckh([pred], [gt], np.array([60.0]))
        b = mpckh([pred[perm]], [gt[perm]], np.array([60.0]))
        assert a == b


class TestPcdr:
    def test_perfect(self):
        z = np.array([2.0, 4.0, 6.0])
        res = pcdr(z, z.copy(), age_classes=["adult", "kid", "adult"])
        assert res.overall == 100.0
        assert all(v == 100.0 for v in res.per_class.values())

    def test_swapped_pair_zero(self):
        assert pcdr(np.array([4.0, 2.0]), np.array([2.0, 4.0])).overall == 0.0

    def test_single_person_undefined(self):
        assert pcdr(np.array([2.0]), np.array([2.0])) is None

    def test_translation_invariance(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 6))
            gt = rng.uniform(2, 8, n)
            pred = gt + rng.standard_normal(n) * 0.4
            c = rng.uniform(-3, 3)
            assert pcdr(pred, gt).overall == pcdr(pred + c, gt + c).overall

    def test_matches_bruteforce(self, rng):
        for trial in range(30):
            n = int(rng.integers(2, 6))
            gt = rng.uniform(1, 9, n)
            pred = gt + rng.standard_normal(n) * 0.5
            classes = [rng.choice(["adult", "teen", "kid"]) for _ in range(n)]
            matched = [bool(rng.random() > 0.2) for _ in range(n)]
            res = pcdr(pred, gt, age_classes=classes, matched_flags=matched)

            def rel(a, b):
                return 0 if abs(a - b) <= 0.2 else (1 if a > b else -1)

            correct = total = 0
            per_class = {}
            for i in range(n):
                for j in range(i + 1, n):
                    ok = (
                        matched[i]
                        and matched[j]
                        and rel(pred[i], pred[j]) == rel(gt[i], gt[j])
                    )
                    correct += ok
                    total += 1
                    for c in {classes[i], classes[j]}:
                        cc, tt = per_class.get(c, (0, 0))
                        per_class[c] = (cc + ok, tt + 1)
            assert res.correct == correct and res.total == total
            for c, (cc, tt) in per_class.items():
                assert res.per_class[c] == pytest.approx(100.0 * cc / tt)


class TestMpjpe:
    def test_root_zero_when_equal(self, rng):
        joints = [rng.standard_normal((22, 3)) for _ in range(2)]
        assert mpjpe_root([j.copy() for j in joints], joints) == 0.0

    def test_root_ignores_global_offsets(self, rng):
        gt = [rng.standard_normal((22, 3)) for _ in range(2)]
        pred = [g + rng.standard_normal(3) for g in gt]
        assert mpjpe_root(pred, gt) == pytest.approx(0.0, abs=1e-9)

    def test_root_matches_bruteforce(self, rng):
        gt = [rng.standard_normal((22, 3)) for _ in range(3)]
        pred = [g + rng.standard_normal((22, 3)) * 0.05 for g in gt]
        got = mpjpe_root(pred, gt)
        errs = []
        for p, g in zip(pred, gt):
            for j in range(22):
                d = (p[j] - p[0]) - (g[j] - g[0])
                errs.append(np.sqrt((d ** 2).sum()))
        assert got == pytest.approx(np.mean(errs) * 1000.0, abs=1e-9)

    def test_joint_pa_removes_similarity(self, rng):
        from camfit.so3 import rodrigues
        import torch

        gt = [rng.standard_normal((22, 3)) + np.array([i, 0, 4]) for i in range(3)]
        r = rodrigues(torch.tensor([0.2, -0.4, 0.1], dtype=torch.float64)).numpy()
        s, t = 1.7, np.array([0.3, -1.0, 2.0])
        pred = [s * g @ r.T + t for g in gt]
        assert mpjpe_joint_pa(pred, gt) == pytest.approx(0.0, abs=1e-9)

    def test_joint_pa_cannot_absorb_per_person_offsets(self, rng):
        gt = [rng.standard_normal((22, 3)) + np.array([i, 0, 4]) for i in range(2)]
        pred = [gt[0] + np.array([0.5, 0, 0]), gt[1] - np.array([0.5, 0, 0])]
        assert mpjpe_joint_pa(pred, gt) > 100.0  # mm

    def test_joint_pa_matches_svd_oracle(self, rng):
        for _ in range(10):
            gt = [rng.standard_normal((22, 3)) + np.array([i, 0, 4]) for i in range(3)]
            pred = [g + rng.standard_normal((22, 3)) * 0.1 for g in gt]
            got = mpjpe_joint_pa(pred, gt)

            # independent Umeyama via scipy-style computation
            src = np.concatenate(pred)
            dst = np.concatenate(gt)
            mu_s, mu_d = src.mean(0), dst.mean(0)
            xs, xd = src - mu_s, dst - mu_d
            u, d, vt = np.linalg.svd(xd.T @ xs / len(src))
            sgn = np.eye(3)
            sgn[2, 2] = np.sign(np.linalg.det(u) * np.linalg.det(vt))
            r = u @ sgn @ vt
            scale = np.trace(np.diag(d) @ sgn) / (xs ** 2).sum() * len(src)
            aligned = scale * src @ r.T + (mu_d - scale * r @ mu_s)
            expected = np.linalg.norm(aligned - dst, axis=-1).mean() * 1000
            assert got == pytest.approx(expected, abs=1e-9)

    def test_joint_pa_requires_enough_joints(self):
        with pytest.raises(ConfigurationError):
            mpjpe_joint_pa([np.zeros((1, 3))], [np.zeros((1, 3))])


class TestPck3d:
    def test_perfect(self, rng):
        gt = [rng.standard_normal((22, 3)) for _ in range(2)]
        assert pck3d([g.copy() for g in gt], gt) == 100.0

    def test_all_unmatched(self, rng):
        gt = [rng.standard_normal((22, 3)) for _ in range(2)]
        assert pck3d([None, None], gt) == 0.0

    def test_matches_bruteforce(self, rng):
        gt = [rng.standard_normal((22, 3)) for _ in range(3)]
        pred = [g + rng.standard_normal((22, 3)) * 0.12 for g in gt]
        matched = [True, False, True]
        got = pck3d(pred, gt, matched_flags=matched)
        hits = 0
        for i, (p, g) in enumerate(zip(pred, gt)):
            for j in range(22):
                hits += int(matched[i] and np.linalg.norm(p[j] - g[j]) < 0.15)
        assert got == pytest.approx(100.0 * hits / (3 * 22))


class TestAttributeF1:
    def test_perfect(self):
        labels = ["a", "b", "a", "c"]
        f1, conf = attribute_f1(labels, labels, ["a", "b", "c"])
        assert f1 == 1.0

    def test_all_missed_zero(self):
        gt = ["a", "b"]
        f1, _ = attribute_f1([MISSED, MISSED], gt, ["a", "b"])
        assert f1 == 0.0

    def test_hand_computed_three_class(self):
        gt = ["a", "a", "b", "b", "c"]
        pred = ["a", "b", "b", "c", "c"]
        # per class: a: tp=1 fp=0 fn=1 -> f1=2/3; b: tp=1 fp=1 fn=1 -> 1/2;
        # c: tp=1 fp=1 fn=0 -> 2/3
        f1, conf = attribute_f1(pred, gt, ["a", "b", "c"])
        assert f1 == pytest.approx((2 / 3 + 1 / 2 + 2 / 3) / 3)
        assert conf[("a", "b")] == 1 and conf[("c", "c")] == 1

    def test_macro_over_present_classes_only(self):
        f1, _ = attribute_f1(["a"], ["a"], ["a", "b", "c"])
        assert f1 == 1.0


class TestDetectionF1:
    def test_identical(self):
        boxes = [np.array([0, 0, 10, 10]), np.array([20, 20, 40, 45])]
        f1, tp, fp, fn = detection_f1(boxes, boxes)
        assert (f1, tp, fp, fn) == (1.0, 2, 0, 0)

    def test_disjoint(self):
        a = [np.array([0, 0, 10, 10])]
        b = [np.array([50, 50, 60, 60])]
        assert detection_f1(a, b)[0] == 0.0

    def test_matches_exhaustive_on_unambiguous(self, rng):
        from itertools import permutations

        for _ in range(30):
            n = int(rng.integers(1, 5))
            centers = rng.uniform(20, 600, (n, 2))
            gt = [np.array([c[0] - 10, c[1] - 10, c[0] + 10, c[1] + 10]) for c in centers]
            pred = []
            for c in centers:
                if rng.random() < 0.7:
                    jit = rng.uniform(-2, 2, 2)
                    pred.append(np.array([c[0] - 10 + jit[0], c[1] - 10 + jit[1], c[0] + 10 + jit[0], c[1] + 10 + jit[1]]))
            if rng.random() < 0.4:
                far = rng.uniform(600, 630, 2)
                pred.append(np.array([far[0], far[1], far[0] + 8, far[1] + 8]))
            f1, tp, fp, fn = detection_f1(pred, gt)

            def iou(a, b):
                x0, y0 = max(a[0], b[0]), max(a[1], b[1])
                x1, y1 = min(a[2], b[2]), min(a[3], b[3])
                inter = max(0, x1 - x0) * max(0, y1 - y0)
                return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)

            best_tp = 0
            idx = list(range(len(gt)))
            for kk in range(min(len(pred), len(gt)), -1, -1):
                if best_tp:
                    break
                for perm in permutations(idx, kk):
                    cnt = sum(1 for pi, gi in enumerate(perm) if iou(pred[pi], gt[gi]) >= 0.5)
                    best_tp = max(best_tp, cnt)
            best_denom = 2 * best_tp + (len(pred) - best_tp) + (len(gt) - best_tp)
            assert f1 == pytest.approx(2 * best_tp / best_denom if best_denom else 0.0)


class TestPercentileFilter:
    def test_nearest_rank_window(self):
        errors = {i: float(i) for i in range(1, 101)}
        kept = percentile_filter(errors, 3, 95)
        assert len(kept) == 93
        assert min(kept) == 3 and max(kept) == 95

    def test_all_equal_kept(self):
        errors = {i: 1.0 for i in range(10)}
        assert len(percentile_filter(errors)) == 10

    def test_single_scene_kept(self):
        assert percentile_filter({"only": 3.2}) == ["only"]

    def test_empty_raises(self):
        with pytest.raises(ConfigurationError):
            percentile_filter({})


def test_umeyama_recovers_transform(rng):
    from camfit.so3 import rodrigues
    import torch

    src = rng.standard_normal((30, 3))
    r = rodrigues(torch.tensor([0.1, 0.7, -0.3], dtype=torch.float64)).numpy()
    s, t = 0.6, np.array([1.0, -2.0, 0.5])
    dst = s * src @ r.T + t
    s2, r2, t2 = umeyama_alignment(src, dst)
    assert s2 == pytest.approx(s, abs=1e-12)
    assert np.abs(r2 - r).max() < 1e-12
    assert np.abs(t2 - t).max() < 1e-12
