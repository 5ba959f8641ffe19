"""JSON file formats (scenes, fits, configs, model) and CSV outputs.

All numeric payloads round-trip bit-exactly (floats are serialized via
repr). Schema violations raise SchemaError naming the JSON path.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .body_model import BodyModel, PersonState
from .camera import Intrinsics
from .errors import SchemaError
from .fit_engine import FitConfig
from .losses import DepthCue, Observed2D
from .semantic_shape import AttributeCatalog, ShapeEstimate
from .synth import Detection, GroundTruthScene, NoiseConfig, PersonCues, PersonTruth, SceneCues

SCENE_FILE_VERSION = "1"
FITS_FILE_VERSION = "1"
SUPPORTED_VERSIONS = {"1"}


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def _req(d, key, path, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(f"missing required field {key!r}", f"{path}.{key}")
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise SchemaError(f"field {key!r} has wrong type", f"{path}.{key}")
    return v


def _check_version(d, path="$"):
    version = _req(d, "version", path, str)
    if version not in SUPPORTED_VERSIONS:
        raise SchemaError(f"unsupported version {version!r}", f"{path}.version")
    return version


def _check_finite(arr, path):
    a = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise SchemaError("non-finite numeric value", path)
    return a


# -- model / catalog / configs ----------------------------------------------


def save_model(path: str, model: BodyModel) -> None:
    _atomic_write(path, _dump({"version": SCENE_FILE_VERSION, "model": model.to_dict()}))


def load_model(path: str) -> BodyModel:
    with open(path) as fh:
        d = json.load(fh)
    _check_version(d)
    return BodyModel.from_dict(_req(d, "model", "$", dict))


def save_catalog(path: str, catalog: AttributeCatalog) -> None:
    _atomic_write(path, _dump({"version": SCENE_FILE_VERSION, "catalog": catalog.to_dict()}))


def load_catalog(path: str) -> AttributeCatalog:
    with open(path) as fh:
        d = json.load(fh)
    _check_version(d)
    return AttributeCatalog.from_dict(_req(d, "catalog", "$", dict))


def save_noise(path: str, noise: NoiseConfig) -> None:
    _atomic_write(path, _dump({"version": SCENE_FILE_VERSION, "noise": noise.to_dict()}))


def load_noise(path: str) -> NoiseConfig:
    with open(path) as fh:
        d = json.load(fh)
    _check_version(d)
    return NoiseConfig.from_dict(_req(d, "noise", "$", dict))


def save_fit_config(path: str, config: FitConfig) -> None:
    _atomic_write(path, _dump({"version": SCENE_FILE_VERSION, "fit_config": config.to_dict()}))


def load_fit_config(path: str) -> FitConfig:
    with open(path) as fh:
        d = json.load(fh)
    _check_version(d)
    return FitConfig.from_dict(_req(d, "fit_config", "$", dict))


# -- scene files --------------------------------------------------------------


@dataclass
class PersonRecord:
    gt: PersonTruth | None
    cues: PersonCues | None
    init: PersonState | None


@dataclass
class SceneRecord:
    scene_id: str
    seed: int
    persons: list


@dataclass
class SceneFileData:
    camera: Intrinsics
    records: list

    def gt_scenes(self) -> list:
        out = []
        for rec in self.records:
            persons = [p.gt for p in rec.persons]
            if any(p is None for p in persons):
                raise SchemaError("scene file has no ground truth (saved with --no-gt?)")
            out.append(
                GroundTruthScene(
                    scene_id=rec.scene_id, seed=rec.seed, camera=self.camera, persons=persons
                )
            )
        return out

    def cues(self) -> list:
        return [SceneCues(persons=[p.cues for p in rec.persons]) for rec in self.records]

    def inits(self) -> list:
        return [[p.init for p in rec.persons] for rec in self.records]


def _cues_to_dict(c: PersonCues) -> dict:
    return {
        "sparse": {"points": c.sparse.points.tolist(), "confidences": c.sparse.confidences.tolist()},
        "dense": {"points": c.dense.points.tolist(), "confidences": c.dense.confidences.tolist()},
        "shape_estimate": c.shape_estimate.to_dict(),
        "depth": {"value": c.depth.value, "valid": c.depth.valid},
        "detection": {"box": np.asarray(c.detection.box).tolist(), "present": c.detection.present},
    }


def _cues_from_dict(d: dict, path: str) -> PersonCues:
    sparse = _req(d, "sparse", path, dict)
    dense = _req(d, "dense", path, dict)
    depth = _req(d, "depth", path, dict)
    det = _req(d, "detection", path, dict)
    return PersonCues(
        sparse=Observed2D(
            points=_check_finite(_req(sparse, "points", f"{path}.sparse"), f"{path}.sparse.points"),
            confidences=_check_finite(
                _req(sparse, "confidences", f"{path}.sparse"), f"{path}.sparse.confidences"
            ),
        ),
        dense=Observed2D(
            points=_check_finite(_req(dense, "points", f"{path}.dense"), f"{path}.dense.points"),
            confidences=_check_finite(
                _req(dense, "confidences", f"{path}.dense"), f"{path}.dense.confidences"
            ),
        ),
        shape_estimate=ShapeEstimate.from_dict(_req(d, "shape_estimate", path, dict)),
        depth=DepthCue(value=float(_req(depth, "value", f"{path}.depth")), valid=bool(depth.get("valid", True))),
        detection=Detection(
            box=_check_finite(_req(det, "box", f"{path}.detection"), f"{path}.detection.box"),
            present=bool(det.get("present", True)),
        ),
    )


def save_scene_file(
    path: str,
    camera: Intrinsics,
    scenes: list,
    cues_list: list,
    inits_list: list,
    no_gt: bool = False,
) -> None:
    recs = []
    for scene, cues, inits in zip(scenes, cues_list, inits_list):
        persons = []
        for i, truth in enumerate(scene.persons):
            entry: dict = {}
            if not no_gt:
                entry["gt"] = {"state": truth.state.to_dict(), "labels": dict(truth.labels)}
            if cues is not None:
                entry["cues"] = _cues_to_dict(cues.persons[i])
            if inits is not None and inits[i] is not None:
                entry["init"] = inits[i].to_dict()
            persons.append(entry)
        recs.append({"id": scene.scene_id, "seed": scene.seed, "persons": persons})
    doc = {"version": SCENE_FILE_VERSION, "camera": camera.to_dict(), "scenes": recs}
    _atomic_write(path, _dump(doc))


def _state_from_dict(d: dict, path: str) -> PersonState:
    for key in ("beta", "phi", "tau", "theta"):
        _check_finite(_req(d, key, path), f"{path}.{key}")
    return PersonState.from_dict(d)


def load_scene_file(path: str) -> SceneFileData:
    with open(path) as fh:
        d = json.load(fh)
    _check_version(d)
    camera = Intrinsics.from_dict(_req(d, "camera", "$", dict))
    records = []
    for si, sc in enumerate(_req(d, "scenes", "$", list)):
        spath = f"$.scenes[{si}]"
        persons = []
        for pi, person in enumerate(_req(sc, "persons", spath, list)):
            ppath = f"{spath}.persons[{pi}]"
            gt = None
            if "gt" in person:
                gd = person["gt"]
                gt = PersonTruth(
                    state=_state_from_dict(_req(gd, "state", f"{ppath}.gt", dict), f"{ppath}.gt.state"),
                    labels=dict(_req(gd, "labels", f"{ppath}.gt", dict)),
                )
            cues = _cues_from_dict(person["cues"], f"{ppath}.cues") if "cues" in person else None
            init = (
                _state_from_dict(person["init"], f"{ppath}.init") if "init" in person else None
            )
            persons.append(PersonRecord(gt=gt, cues=cues, init=init))
        records.append(
            SceneRecord(scene_id=str(_req(sc, "id", spath)), seed=int(sc.get("seed", 0)), persons=persons)
        )
    return SceneFileData(camera=camera, records=records)


# -- fits files ---------------------------------------------------------------


@dataclass
class FitsScene:
    scene_id: str
    states: list  # PersonState or None per person slot
    person_reproj_errors: list
    mean_reproj_error: float
    final_losses: dict


@dataclass
class FitsFileData:
    config_hash: str
    seed: int
    scenes: list
    pgt_filter: dict | None = None


def save_fits(path: str, data: FitsFileData) -> None:
    doc = {
        "version": FITS_FILE_VERSION,
        "config_hash": data.config_hash,
        "seed": data.seed,
        "scenes": [
            {
                "id": s.scene_id,
                "persons": [
                    {"state": st.to_dict() if st is not None else None, "reproj_error": e}
                    for st, e in zip(s.states, s.person_reproj_errors)
                ],
                "mean_reproj_error": s.mean_reproj_error,
                "final_losses": s.final_losses,
            }
            for s in data.scenes
        ],
    }
    if data.pgt_filter is not None:
        doc["pgt_filter"] = data.pgt_filter
    _atomic_write(path, _dump(doc))


def load_fits(path: str) -> FitsFileData:
    with open(path) as fh:
        d = json.load(fh)
    _check_version(d)
    scenes = []
    for si, sc in enumerate(_req(d, "scenes", "$", list)):
        spath = f"$.scenes[{si}]"
        states, errs = [], []
        for pi, person in enumerate(_req(sc, "persons", spath, list)):
            ppath = f"{spath}.persons[{pi}]"
            state_d = _req(person, "state", ppath)
            states.append(None if state_d is None else _state_from_dict(state_d, f"{ppath}.state"))
            errs.append(float(person.get("reproj_error", float("nan"))))
        scenes.append(
            FitsScene(
                scene_id=str(_req(sc, "id", spath)),
                states=states,
                person_reproj_errors=errs,
                mean_reproj_error=float(sc.get("mean_reproj_error", float("nan"))),
                final_losses=dict(sc.get("final_losses", {})),
            )
        )
    return FitsFileData(
        config_hash=str(_req(d, "config_hash", "$")),
        seed=int(_req(d, "seed", "$")),
        scenes=scenes,
        pgt_filter=d.get("pgt_filter"),
    )


# -- CSV outputs --------------------------------------------------------------


def write_metrics_csv(path: str, report, extra_label: str = "") -> None:
    rows = [["metric", "class", "value", "count"]]
    for metric, cls, value, count in report.rows():
        rows.append([metric, cls, f"{value:.10g}", str(count)])
    _atomic_write(path, "\n".join(",".join(r) for r in rows) + "\n")


def read_metrics_csv(path: str) -> dict:
    out = {}
    with open(path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out[(row["metric"], row["class"])] = float(row["value"])
    return out


def write_confusion_csv(path: str, confusions: dict) -> None:
    rows = [["attribute", "gt_label", "pred_label", "count"]]
    for attr in sorted(confusions):
        for (gt, pred), count in sorted(confusions[attr].items()):
            rows.append([attr, gt, pred, str(count)])
    _atomic_write(path, "\n".join(",".join(r) for r in rows) + "\n")


def write_trace_csv(path: str, traces: dict) -> None:
    """traces: scene_id -> list of TraceRow."""
    rows = [["scene_id", "stage", "iter", "term", "value"]]
    for scene_id in sorted(traces):
        for t in traces[scene_id]:
            rows.append([scene_id, t.stage, str(t.iteration), t.term, f"{t.value:.10g}"])
    _atomic_write(path, "\n".join(",".join(r) for r in rows) + "\n")


def write_report_csv(path: str, init_metrics: dict, fit_metrics: dict) -> None:
    """Comparison table with a delta row per metric (fitted - init)."""
    keys = sorted(set(init_metrics) | set(fit_metrics))
    rows = [["metric", "class", "init", "fitted", "delta"]]
    for metric, cls in keys:
        a = init_metrics.get((metric, cls), float("nan"))
        b = fit_metrics.get((metric, cls), float("nan"))
        rows.append([metric, cls, f"{a:.10g}", f"{b:.10g}", f"{b - a:.10g}"])
    _atomic_write(path, "\n".join(",".join(r) for r in rows) + "\n")
