"""Three-stage joint optimization of all persons in a scene.

Stage schedule follows the standard recipe: translation only (coarse depth
placement), then translation + root orientation + shape, then everything.
All persons update jointly each step; the drift regularizer targets the
state at the start of the current stage.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import torch

from .body_model import BodyModel, PersonState, SceneParams, synthesize_vertices
from .camera import Intrinsics
from .errors import ConfigurationError, EvaluationError
from .losses import (
    DEPTH_ORDERING,
    LossWeights,
    SceneObservations,
    make_prev_reference,
    total_loss,
)

ALL_BLOCKS = ("tau", "phi", "beta", "theta")

PROFILE_MULTIHMR = "multihmr_like"
PROFILE_CAMERAHMR = "camerahmr_like"

DEFAULT_LEARNING_RATES = {"tau": 0.01, "phi": 0.01, "beta": 0.001, "theta": 0.001}


@dataclass
class StageConfig:
    name: str
    free_params: tuple
    iterations: int
    weights: LossWeights
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if not self.free_params:
            raise ConfigurationError("free_params must be non-empty")
        for p in self.free_params:
            if p not in ALL_BLOCKS:
                raise ConfigurationError(f"unknown parameter block {p!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "free_params": list(self.free_params),
            "iterations": self.iterations,
            "weights": self.weights.to_dict(),
            "learning_rates": dict(self.learning_rates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(
            name=str(d["name"]),
            free_params=tuple(d["free_params"]),
            iterations=int(d["iterations"]),
            weights=LossWeights.from_dict(d["weights"]),
            learning_rates={k: float(v) for k, v in d["learning_rates"].items()},
        )


@dataclass
class FitConfig:
    stages: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    tol: float | None = None  # optional early stop on relative loss change

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("need at least one stage")

    def to_dict(self) -> dict:
        return {
            "stages": [s.to_dict() for s in self.stages],
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
            "tol": self.tol,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        return cls(
            stages=[StageConfig.from_dict(s) for s in d["stages"]],
            beta1=float(d.get("beta1", 0.9)),
            beta2=float(d.get("beta2", 0.999)),
            eps=float(d.get("eps", 1e-8)),
            seed=int(d.get("seed", 0)),
            tol=None if d.get("tol") is None else float(d["tol"]),
        )

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def default_config(
    profile: str = PROFILE_MULTIHMR, depth_variant: str = DEPTH_ORDERING
) -> FitConfig:
    """Published stage schedule and weights.

    Stage 1 frees translation only (50 iterations for the multihmr_like
    profile, 200 for camerahmr_like); its drift weight of 10 is applied to
    the x-y components of tau so the depth term keeps authority over z.
    """
    if profile == PROFILE_MULTIHMR:
        stage1_iters = 50
    elif profile == PROFILE_CAMERAHMR:
        stage1_iters = 200
    else:
        raise ConfigurationError(f"unknown profile {profile!r}")

    shared = dict(
        lambda_2d=0.01,
        lambda_dense=0.001,
        lambda_shape=10.0,
        sigma=100.0,
        depth_variant=depth_variant,
    )
    stages = [
        StageConfig(
            name="translation",
            free_params=("tau",),
            iterations=stage1_iters,
            weights=LossWeights(lambda_depth=10.0, lambda_init_tau_xy=10.0, **shared),
        ),
        StageConfig(
            name="orientation_shape",
            free_params=("tau", "phi", "beta"),
            iterations=100,
            weights=LossWeights(
                lambda_depth=50.0,
                lambda_init_beta=0.01,
                lambda_init_verts=0.01,
                lambda_init_phi=10.0,
                **shared,
            ),
        ),
        StageConfig(
            name="full_pose",
            free_params=("tau", "phi", "beta", "theta"),
            iterations=200,
            weights=LossWeights(
                lambda_depth=0.0,
                lambda_init_beta=5.0,
                lambda_init_verts=0.01,
                lambda_init_phi=0.01,
                **shared,
            ),
        ),
    ]
    return FitConfig(stages=stages)


@dataclass
class TraceRow:
    stage: str
    iteration: int
    term: str
    value: float


@dataclass
class SceneResult:
    states: list
    trace: list  # TraceRow
    diagnostics: dict
    wall_time: float


class AdamState:
    """Per-block first-order adaptive-moment accumulators."""

    def __init__(self, params: SceneParams, free: tuple, beta1: float, beta2: float, eps: float):
        self.free = tuple(free)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: torch.zeros_like(getattr(params, k)) for k in self.free}
        self.v = {k: torch.zeros_like(getattr(params, k)) for k in self.free}


def step(params: SceneParams, grads: dict, stage: StageConfig, opt: AdamState) -> SceneParams:
    """One adaptive-moment update restricted to the stage's free blocks.

    Frozen blocks are passed through untouched (same tensors)."""
    opt.t += 1
    t = opt.t
    new = dict(params.blocks())
    with torch.no_grad():
        for name in opt.free:
            g = grads.get(name)
            if g is None:
                continue
            lr = stage.learning_rates.get(name, 0.01)
            m = opt.m[name].mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
            v = opt.v[name].mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
            m_hat = m / (1.0 - opt.beta1 ** t)
            v_hat = v / (1.0 - opt.beta2 ** t)
            new[name] = new[name] - lr * m_hat / (v_hat.sqrt() + opt.eps)
    return SceneParams(**new)


def _clamp_beta(params: SceneParams, free: tuple) -> SceneParams:
    if "beta" not in free:
        return params
    blocks = dict(params.blocks())
    blocks["beta"] = blocks["beta"].clamp(0.0, 1.0)
    return SceneParams(**blocks)


def fit_scene(
    model: BodyModel,
    init_states: list,
    cues: SceneObservations,
    camera: Intrinsics,
    config: FitConfig,
) -> SceneResult:
    """Run the staged optimization; returns final states plus loss traces."""
    if not init_states:
        raise ConfigurationError("scene has no persons")
    for st in init_states:
        st.check_model(model.config)
        if not st.is_finite():
            raise ConfigurationError("initial state contains non-finite values")
    if cues.person_count != len(init_states):
        raise ConfigurationError("cues are not aligned with the person list")

    t_start = time.perf_counter()
    params = SceneParams.from_states(init_states)
    trace: list[TraceRow] = []
    diagnostics: dict = {"stages": []}

    for stage in config.stages:
        prev = make_prev_reference(model, params)
        body_cache = None
        if set(stage.free_params) == {"tau"}:
            # Only translation moves: cache the body at the stage-start tau
            # and shift it by (tau - tau0). Exact, and bit-identical to a
            # fresh synthesis while tau has not moved.
            with torch.no_grad():
                verts0 = synthesize_vertices(
                    model, params.beta, params.phi, params.tau, params.theta
                )
                body_cache = (verts0, params.tau.clone())
        opt = AdamState(params, stage.free_params, config.beta1, config.beta2, config.eps)
        recent: list[float] = []
        stopped_at = None
        for it in range(stage.iterations):
            leaves = dict(params.blocks())
            for name in stage.free_params:
                leaves[name] = leaves[name].detach().clone().requires_grad_(True)
            live = SceneParams(**leaves)
            out = total_loss(
                model, camera, live, cues, prev, stage.weights,
                body_cache=body_cache, with_terms=True,
            )
            value = out.value
            if not bool(torch.isfinite(value)):
                raise EvaluationError(
                    f"non-finite loss in stage {stage.name!r} at iteration {it}"
                )
            for term, tv in out.terms.items():
                trace.append(TraceRow(stage.name, it, term, tv))
            grad_list = torch.autograd.grad(
                value, [leaves[n] for n in stage.free_params], allow_unused=True
            )
            grads = {
                n: (g if g is not None else torch.zeros_like(leaves[n]))
                for n, g in zip(stage.free_params, grad_list)
            }
            params = step(live, grads, stage, opt)
            params = _clamp_beta(params, stage.free_params)
            params = params.detach_clone() if any(
                getattr(params, b).requires_grad for b in SceneParams.BLOCKS
            ) else params

            if config.tol is not None:
                recent.append(float(value.detach()))
                if len(recent) > 10:
                    recent.pop(0)
                    lo, hi = min(recent), max(recent)
                    if hi - lo <= config.tol * max(abs(hi), 1e-12):
                        stopped_at = it
                        break
        diagnostics["stages"].append(
            {"name": stage.name, "iterations_run": stage.iterations if stopped_at is None else stopped_at + 1}
        )

    wall = time.perf_counter() - t_start
    return SceneResult(
        states=params.to_states(), trace=trace, diagnostics=diagnostics, wall_time=wall
    )


def with_weight_overrides(config: FitConfig, **overrides) -> FitConfig:
    """New config with per-stage weight fields replaced (ablation helper)."""
    stages = [replace(s, weights=replace(s.weights, **overrides)) for s in config.stages]
    return replace(config, stages=stages)
