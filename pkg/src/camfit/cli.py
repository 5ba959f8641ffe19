"""Command-line surface: generate / fit / eval / refit / gradcheck / report."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import torch

from .body_model import DTYPE, build_default_model, synthesize_vertices
from .camera import default_camera
from .diff_engine import fd_check, gradient
from .errors import CamfitError
from .evaluate import evaluate_suite
from .fit_engine import FitConfig, default_config, fit_scene
from .losses import SceneObjective, make_prev_reference
from .metrics import percentile_filter
from .refit import RefitConfig, refit_batch
from .scene_io import (
    FitsFileData,
    FitsScene,
    load_catalog,
    load_fits,
    load_fit_config,
    load_model,
    load_noise,
    load_scene_file,
    read_metrics_csv,
    save_fits,
    save_model,
    save_scene_file,
    write_confusion_csv,
    write_metrics_csv,
    write_report_csv,
    write_trace_csv,
)
from .synth import NoiseConfig, PlacementConfig, derive_cues, perturb_init, sample_scene
from .body_model import SceneParams


def _load_model_arg(path):
    return load_model(path) if path else build_default_model()


def _load_config_arg(value) -> FitConfig:
    if value is None:
        return default_config()
    if value.startswith("profile="):
        return default_config(profile=value.split("=", 1)[1])
    return load_fit_config(value)


def _cmd_generate(args) -> int:
    model = _load_model_arg(args.model)
    catalog = load_catalog(args.anchors) if args.anchors else None
    noise = load_noise(args.noise) if args.noise else NoiseConfig()
    camera = default_camera()
    placement = PlacementConfig(z_range=(args.z_min, args.z_max))
    rng = np.random.default_rng(args.seed)

    scenes, cues_list, inits_list = [], [], []
    for i in range(args.n_scenes):
        n_persons = int(rng.integers(args.persons_min, args.persons_max + 1))
        scene = sample_scene(
            model, camera, n_persons, rng_seed=args.seed + i, placement=placement,
            catalog=catalog, scene_id=f"scene_{i:04d}",
        )
        cues = derive_cues(model, scene, noise, rng_seed=args.seed + 10_000 + i, catalog=catalog)
        inits = perturb_init(model, scene, noise, rng_seed=args.seed + 20_000 + i)
        # Persons whose detection was missed have no feedforward prediction.
        inits = [
            st if cues.persons[p].detection.present else None for p, st in enumerate(inits)
        ]
        scenes.append(scene)
        cues_list.append(cues)
        inits_list.append(inits)
    save_scene_file(args.out, camera, scenes, cues_list, inits_list, no_gt=args.no_gt)
    if args.save_model:
        save_model(args.save_model, model)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _reproj_error_px(model, camera, state, cue) -> float:
    with torch.no_grad():
        verts = synthesize_vertices(model, state.beta, state.phi, state.tau, state.theta)
        kp3 = model.sparse_kp_regressor @ verts
        z = kp3[:, 2]
        u = camera.fx * kp3[:, 0] / z + camera.cx
        v = camera.fy * kp3[:, 1] / z + camera.cy
    pred = np.stack([u.numpy(), v.numpy()], -1)
    conf = cue.sparse.confidences
    mask = conf > 0
    if not mask.any():
        return float("nan")
    return float(np.linalg.norm(pred[mask] - cue.sparse.points[mask], axis=-1).mean())


def _fit_one(model, camera, record, config: FitConfig) -> dict:
    fit_idx = [i for i, p in enumerate(record.persons) if p.init is not None and p.cues is not None]
    n = len(record.persons)
    if not fit_idx:
        return {
            "id": record.scene_id,
            "states": [None] * n,
            "person_errors": [float("nan")] * n,
            "final_losses": {},
            "trace": [],
        }
    from .synth import SceneCues

    cues = SceneCues(persons=[record.persons[i].cues for i in fit_idx])
    init_states = [record.persons[i].init for i in fit_idx]
    result = fit_scene(model, init_states, cues.observations(), camera, config)

    states = [None] * n
    errors = [float("nan")] * n
    for k, i in enumerate(fit_idx):
        states[i] = result.states[k]
        errors[i] = _reproj_error_px(model, camera, result.states[k], record.persons[i].cues)
    last_iter = max((t.iteration for t in result.trace), default=0)
    final_losses = {
        t.term: t.value
        for t in result.trace
        if t.iteration == last_iter and t.stage == config.stages[-1].name
    }
    return {
        "id": record.scene_id,
        "states": states,
        "person_errors": errors,
        "final_losses": final_losses,
        "trace": [(t.stage, t.iteration, t.term, t.value) for t in result.trace],
    }


_WORKER_STATE: dict = {}


def _fit_worker(payload):
    scenes_path, model_path, config_json, idx = payload
    key = (scenes_path, model_path)
    if key not in _WORKER_STATE:
        torch.set_num_threads(1)
        model = _load_model_arg(model_path)
        data = load_scene_file(scenes_path)
        _WORKER_STATE[key] = (model, data)
    model, data = _WORKER_STATE[key]
    config = FitConfig.from_dict(json.loads(config_json))
    out = _fit_one(model, data.camera, data.records[idx], config)
    out["states"] = [None if s is None else s.to_dict() for s in out["states"]]
    return idx, out


def _cmd_fit(args) -> int:
    model = _load_model_arg(args.model)
    config = _load_config_arg(args.config)
    if args.tol is not None:
        config.tol = args.tol
    data = load_scene_file(args.scenes)

    results: list = [None] * len(data.records)
    if args.jobs > 1:
        payloads = [
            (args.scenes, args.model, json.dumps(config.to_dict()), i)
            for i in range(len(data.records))
        ]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for idx, out in pool.map(_fit_worker, payloads):
                from .body_model import PersonState

                out["states"] = [
                    None if s is None else PersonState.from_dict(s) for s in out["states"]
                ]
                results[idx] = out
    else:
        for i, rec in enumerate(data.records):
            results[i] = _fit_one(model, data.camera, rec, config)

    scenes_out, traces = [], {}
    for out in results:
        errs = [e for e in out["person_errors"] if np.isfinite(e)]
        scenes_out.append(
            FitsScene(
                scene_id=out["id"],
                states=out["states"],
                person_reproj_errors=out["person_errors"],
                mean_reproj_error=float(np.mean(errs)) if errs else float("nan"),
                final_losses=out["final_losses"],
            )
        )
        from .fit_engine import TraceRow

        traces[out["id"]] = [TraceRow(*row) for row in out["trace"]]

    scene_errors = {
        s.scene_id: s.mean_reproj_error for s in scenes_out if np.isfinite(s.mean_reproj_error)
    }
    kept = percentile_filter(scene_errors, args.pgt_lo, args.pgt_hi) if scene_errors else []
    fits = FitsFileData(
        config_hash=config.config_hash(),
        seed=args.seed,
        scenes=scenes_out,
        pgt_filter={"lo": args.pgt_lo, "hi": args.pgt_hi, "kept_scene_ids": sorted(kept)},
    )
    save_fits(args.out, fits)
    if args.trace:
        write_trace_csv(args.trace, traces)
    print(f"fitted {len(scenes_out)} scenes -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = _load_model_arg(args.model)
    catalog = load_catalog(args.anchors) if args.anchors else None
    data = load_scene_file(args.scenes)
    scenes = data.gt_scenes()
    cues_list = data.cues()
    if args.fits:
        fits = load_fits(args.fits)
        by_id = {s.scene_id: s.states for s in fits.scenes}
        preds = [by_id[rec.scene_id] for rec in data.records]
    else:
        preds = data.inits()
    report, confusions = evaluate_suite(model, data.camera, scenes, cues_list, preds, catalog)
    write_metrics_csv(args.out, report)
    if args.confusion:
        write_confusion_csv(args.confusion, confusions)
    for metric, cls, value, _ in report.rows():
        label = f"{metric}[{cls}]" if cls else metric
        print(f"{label}: {value:.3f}")
    return 0


def _cmd_refit(args) -> int:
    model = _load_model_arg(args.model)
    with open(args.meshes) as fh:
        doc = json.load(fh)
    meshes = np.asarray(doc["meshes"], dtype=np.float64)
    config = RefitConfig(
        iterations=args.iterations,
        vertex_map=np.asarray(doc["vertex_map"], dtype=np.float64) if "vertex_map" in doc else None,
    )
    result = refit_batch(model, meshes, config)
    out = {
        "version": "1",
        "fits": [
            {"state": s.to_dict(), "rmse": float(r)}
            for s, r in zip(result.states, result.rmse)
        ],
    }
    from .scene_io import _atomic_write, _dump

    _atomic_write(args.out, _dump(out))
    print(f"refit {len(result.states)} meshes; max rmse {result.rmse.max():.2e} m")
    return 0


def _cmd_gradcheck(args) -> int:
    model = _load_model_arg(args.model)
    data = load_scene_file(args.scenes)
    rec = data.records[args.scene_index]
    from .synth import SceneCues

    idx = [i for i, p in enumerate(rec.persons) if p.cues is not None]
    cues = SceneCues(persons=[rec.persons[i].cues for i in idx]).observations()
    states = [
        rec.persons[i].init if rec.persons[i].init is not None else rec.persons[i].gt.state
        for i in idx
    ]
    params = SceneParams.from_states(states)
    weights = default_config().stages[1].weights
    prev = make_prev_reference(model, params)
    objective = SceneObjective(model, data.camera, cues, prev, weights)
    report = gradient(objective, params)
    check = fd_check(objective, params, h=args.h, rel_tol=args.rel_tol)
    doc = report.to_dict()
    doc["max_rel_fd_error"] = check.max_rel_error
    doc["fd_passed"] = check.passed
    doc["fd_worst"] = {"block": check.worst_block, "index": check.worst_index}
    doc["fd_eval_count"] = check.eval_count
    print(json.dumps(doc, indent=1, sort_keys=True))
    return 0 if check.passed else 1


def _cmd_report(args) -> int:
    init_metrics = read_metrics_csv(args.init_metrics)
    fit_metrics = read_metrics_csv(args.fit_metrics)
    write_report_csv(args.out, init_metrics, fit_metrics)
    if args.trace and args.trace_out:
        import csv as _csv

        with open(args.trace) as fh:
            rows = list(_csv.DictReader(fh))
        terms = sorted({r["term"] for r in rows})
        by_key: dict = {}
        for r in rows:
            key = (r["scene_id"], r["stage"], int(r["iter"]))
            by_key.setdefault(key, {})[r["term"]] = r["value"]
        lines = [",".join(["scene_id", "stage", "iter"] + terms)]
        for key in sorted(by_key):
            vals = [by_key[key].get(t, "") for t in terms]
            lines.append(",".join([key[0], key[1], str(key[2])] + vals))
        from .scene_io import _atomic_write

        _atomic_write(args.trace_out, "\n".join(lines) + "\n")
    print(f"wrote comparison table to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample ground-truth scenes and simulated cues")
    g.add_argument("--n-scenes", type=int, required=True)
    g.add_argument("--persons-min", type=int, default=2)
    g.add_argument("--persons-max", type=int, default=4)
    g.add_argument("--noise", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--model", default=None)
    g.add_argument("--anchors", default=None)
    g.add_argument("--no-gt", action="store_true")
    g.add_argument("--z-min", type=float, default=2.0)
    g.add_argument("--z-max", type=float, default=8.0)
    g.add_argument("--save-model", default=None)
    g.set_defaults(func=_cmd_generate)

    f = sub.add_parser("fit", help="staged multi-person optimization")
    f.add_argument("--scenes", required=True)
    f.add_argument("--model", default=None)
    f.add_argument("--config", default=None, help="fit config JSON path or 'profile=NAME'")
    f.add_argument("--out", required=True)
    f.add_argument("--trace", default=None)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--jobs", type=int, default=1)
    f.add_argument("--tol", type=float, default=None)
    f.add_argument("--pgt-lo", type=float, default=3.0)
    f.add_argument("--pgt-hi", type=float, default=95.0)
    f.set_defaults(func=_cmd_fit)

    e = sub.add_parser("eval", help="metrics against ground truth")
    e.add_argument("--scenes", required=True)
    e.add_argument("--fits", default=None, help="omit to evaluate the initializations")
    e.add_argument("--model", default=None)
    e.add_argument("--anchors", default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--confusion", default=None)
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("refit", help="fit parameters to meshes in model topology")
    r.add_argument("--meshes", required=True)
    r.add_argument("--model", default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--iterations", type=int, default=5)
    r.set_defaults(func=_cmd_refit)

    gc = sub.add_parser("gradcheck", help="print the gradient report for one scene")
    gc.add_argument("--scenes", required=True)
    gc.add_argument("--model", default=None)
    gc.add_argument("--scene-index", type=int, default=0)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--rel-tol", type=float, default=1e-4)
    gc.set_defaults(func=_cmd_gradcheck)

    rp = sub.add_parser("report", help="compose metrics files into a comparison table")
    rp.add_argument("--init-metrics", required=True)
    rp.add_argument("--fit-metrics", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--trace", default=None)
    rp.add_argument("--trace-out", default=None)
    rp.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CamfitError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
