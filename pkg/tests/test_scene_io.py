import json

import numpy as np
import pytest
import torch

from camfit.body_model import build_default_model
from camfit.errors import SchemaError
from camfit.fit_engine import default_config
from camfit.scene_io import (
    FitsFileData,
    FitsScene,
    load_fit_config,
    load_fits,
    load_model,
    load_noise,
    load_scene_file,
    save_fit_config,
    save_fits,
    save_model,
    save_noise,
    save_scene_file,
)
from camfit.synth import NoiseConfig, derive_cues, perturb_init, sample_scene


@pytest.fixture()
def scene_path(tmp_path, model, camera):
    noise = NoiseConfig(kp_pixel_sigma=1.5, init_tau_z_sigma=0.2)
    scenes, cues_list, inits = [], [], []
    for i in range(2):
        scene = sample_scene(model, camera, 2, rng_seed=100 + i, scene_id=f"s{i}")
        cues = derive_cues(model, scene, noise, rng_seed=200 + i)
        scenes.append(scene)
        cues_list.append(cues)
        inits.append(perturb_init(model, scene, noise, rng_seed=300 + i))
    path = tmp_path / "scenes.json"
    save_scene_file(str(path), camera, scenes, cues_list, inits)
    return path, scenes, cues_list, inits


def test_scene_roundtrip_bit_exact(scene_path):
    path, scenes, cues_list, inits = scene_path
    data = load_scene_file(str(path))
    for rec, scene, cues, init in zip(data.records, scenes, cues_list, inits):
        for p_rec, truth, cue, st in zip(rec.persons, scene.persons, cues.persons, init):
            assert torch.equal(p_rec.gt.state.beta, truth.state.beta)
            assert torch.equal(p_rec.gt.state.theta, truth.state.theta)
            assert p_rec.gt.labels == truth.labels
            assert np.array_equal(p_rec.cues.sparse.points, cue.sparse.points)
            assert np.array_equal(p_rec.cues.dense.confidences, cue.dense.confidences)
            assert p_rec.cues.depth.value == cue.depth.value
            assert torch.equal(p_rec.init.tau, st.tau)


def test_double_roundtrip_identical_bytes(scene_path, camera, tmp_path):
    path, *_ = scene_path
    data = load_scene_file(str(path))
    out = tmp_path / "again.json"
    save_scene_file(
        str(out),
        camera,
        [
            type("S", (), {"scene_id": r.scene_id, "seed": r.seed, "persons": [p.gt for p in r.persons]})
            for r in data.records
        ],
        data.cues(),
        data.inits(),
    )
    assert out.read_bytes() == path.read_bytes()


def test_missing_camera_schema_error(tmp_path, scene_path):
    path, *_ = scene_path
    doc = json.loads(path.read_text())
    del doc["camera"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as exc:
        load_scene_file(str(bad))
    assert exc.value.path == "$.camera"


def test_unsupported_version(tmp_path, scene_path):
    path, *_ = scene_path
    doc = json.loads(path.read_text())
    doc["version"] = "999"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as exc:
        load_scene_file(str(bad))
    assert "version" in str(exc.value)


def test_nonfinite_rejected(tmp_path, scene_path):
    path, *_ = scene_path
    doc = json.loads(path.read_text())
    doc["scenes"][0]["persons"][0]["init"]["tau"][2] = float("nan")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc).replace("NaN", "NaN"))
    with pytest.raises((SchemaError, ValueError)):
        load_scene_file(str(bad))


def test_no_gt_strips_ground_truth(tmp_path, model, camera):
    scene = sample_scene(model, camera, 1, rng_seed=5)
    cues = derive_cues(model, scene, NoiseConfig(), rng_seed=6)
    init = perturb_init(model, scene, NoiseConfig(), rng_seed=7)
    path = tmp_path / "blind.json"
    save_scene_file(str(path), camera, [scene], [cues], [init], no_gt=True)
    data = load_scene_file(str(path))
    assert data.records[0].persons[0].gt is None
    with pytest.raises(SchemaError):
        data.gt_scenes()


def test_model_roundtrip(tmp_path, model):
    path = tmp_path / "model.json"
    save_model(str(path), model)
    loaded = load_model(str(path))
    assert torch.equal(loaded.template_vertices, model.template_vertices)
    assert torch.equal(loaded.shape_blendshapes, model.shape_blendshapes)
    assert loaded.kinematic_parents == model.kinematic_parents
    assert torch.equal(loaded.stature_values, model.stature_values)


def test_noise_and_config_roundtrip(tmp_path):
    noise = NoiseConfig(kp_pixel_sigma=2.5, attribute_mode="labels",
                        confusion={"age": np.eye(6).tolist()})
    path = tmp_path / "noise.json"
    save_noise(str(path), noise)
    loaded = load_noise(str(path))
    assert loaded.kp_pixel_sigma == 2.5
    assert loaded.attribute_mode == "labels"

    cfg = default_config("camerahmr_like")
    cpath = tmp_path / "fit.json"
    save_fit_config(str(cpath), cfg)
    assert load_fit_config(str(cpath)).to_dict() == cfg.to_dict()


def test_fits_roundtrip(tmp_path, model, camera):
    scene = sample_scene(model, camera, 2, rng_seed=9)
    states = [p.state for p in scene.persons]
    data = FitsFileData(
        config_hash="abc123",
        seed=5,
        scenes=[
            FitsScene(
                scene_id="s0",
                states=[states[0], None],
                person_reproj_errors=[1.25, float("nan")],
                mean_reproj_error=1.25,
                final_losses={"total": 0.5},
            )
        ],
        pgt_filter={"lo": 3.0, "hi": 95.0, "kept_scene_ids": ["s0"]},
    )
    path = tmp_path / "fits.json"
    save_fits(str(path), data)
    loaded = load_fits(str(path))
    assert loaded.config_hash == "abc123"
    assert loaded.scenes[0].states[1] is None
    assert torch.equal(loaded.scenes[0].states[0].beta, states[0].beta)
    assert loaded.scenes[0].final_losses == {"total": 0.5}
    assert loaded.pgt_filter["kept_scene_ids"] == ["s0"]
