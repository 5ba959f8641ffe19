import numpy as np
import pytest
import torch

from camfit.evaluate import evaluate_suite
from camfit.metrics import MISSED
from camfit.synth import NoiseConfig, PlacementConfig, derive_cues, perturb_init, sample_scene


def _suite(model, camera, n_scenes=3, persons=3, noise=None, seed=0):
    noise = noise or NoiseConfig()
    scenes, cues, inits = [], [], []
    for i in range(n_scenes):
        sc = sample_scene(model, camera, persons, rng_seed=seed + i,
                          placement=PlacementConfig(z_range=(2.0, 6.0)))
        scenes.append(sc)
        cues.append(derive_cues(model, sc, noise, rng_seed=100 + i))
        inits.append(perturb_init(model, sc, noise, rng_seed=200 + i))
    return scenes, cues, inits


def test_ground_truth_scores_perfectly(model, camera, catalog):
    scenes, cues, _ = _suite(model, camera)
    preds = [[p.state for p in sc.persons] for sc in scenes]
    rep, confusions = evaluate_suite(model, camera, scenes, cues, preds, catalog)
    assert rep.mpckh == 100.0
    assert rep.pcdr_overall == 100.0
    assert rep.mpjpe_root == pytest.approx(0.0, abs=1e-9)
    assert rep.mpjpe_joint_pa == pytest.approx(0.0, abs=1e-9)
    assert rep.pck3d_15cm == 100.0
    assert rep.age_f1 == 1.0
    assert rep.gender_f1 == 1.0
    assert rep.detection_f1 == 1.0
    assert all(v == 100.0 for v in rep.pcdr_per_class.values())


def test_missing_person_penalized(model, camera, catalog):
    scenes, cues, _ = _suite(model, camera, n_scenes=2)
    preds = []
    for sc in scenes:
        states = [p.state for p in sc.persons]
        states[0] = None  # this person was never predicted
        preds.append(states)
    rep, confusions = evaluate_suite(model, camera, scenes, cues, preds, catalog)
    assert rep.mpckh < 100.0
    assert rep.pcdr_overall < 100.0
    assert rep.pck3d_15cm < 100.0
    assert rep.age_f1 < 1.0
    missed = sum(v for (gt, pred), v in confusions["age"].items() if pred == MISSED)
    assert missed == 2


def test_perturbed_predictions_score_between(model, camera, catalog):
    noise = NoiseConfig(init_tau_z_sigma=0.4, init_beta_sigma=0.15, init_theta_sigma=0.05)
    scenes, cues, inits = _suite(model, camera, noise=noise)
    rep, _ = evaluate_suite(model, camera, scenes, cues, inits, catalog)
    assert 0.0 < rep.pcdr_overall < 100.0
    assert rep.mpjpe_root > 0.0
    assert rep.counts["persons"] == 9


def test_report_rows_shape(model, camera, catalog):
    scenes, cues, _ = _suite(model, camera, n_scenes=1)
    preds = [[p.state for p in sc.persons] for sc in scenes]
    rep, _ = evaluate_suite(model, camera, scenes, cues, preds, catalog)
    rows = rep.rows()
    metrics = {r[0] for r in rows}
    assert {"mpckh", "pcdr", "mpjpe_root", "mpjpe_joint_pa", "pck3d_15cm",
            "age_f1", "gender_f1", "detection_f1"} <= metrics
