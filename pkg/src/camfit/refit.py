"""Fast batched fitting of body parameters to target meshes in the model's
topology.

Alternates, for a fixed number of iterations, between (a) refitting every
body part's global orientation with a weighted Kabsch solve against the
target (delta rotations composed onto the current state, weights = the
joint's skinning column) and (b) solving shape and translation jointly by
exact linear least squares given the rotations. An optional final pass walks
the kinematic tree once, re-posing after each joint update.

Everything is gradient-free and vectorized over a leading mesh batch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .body_model import (
    AGE_DIM,
    DTYPE,
    HEIGHT_DIM,
    BodyModel,
    PersonState,
    shaped_template,
    synthesize_vertices,
)
from .errors import ConfigurationError
from .so3 import log_map, rodrigues

_WEIGHT_EPS = 1e-12


@dataclass
class RefitConfig:
    iterations: int = 5
    do_final_kinematic_pass: bool = True
    vertex_map: np.ndarray | None = None  # (V_model, V_source) row-stochastic

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.vertex_map is not None:
            vm = np.asarray(self.vertex_map, dtype=np.float64)
            if vm.ndim != 2:
                raise ConfigurationError("vertex_map must be a matrix")
            if np.any(vm < -1e-12) or np.max(np.abs(vm.sum(1) - 1.0)) > 1e-9:
                raise ConfigurationError("vertex_map rows must sum to 1 +- 1e-9")
            self.vertex_map = vm


@dataclass
class RefitResult:
    states: list  # PersonState per mesh
    rmse: np.ndarray  # (B,) final per-vertex RMSE, meters
    residual_trace: np.ndarray  # (iterations + 1, B) RMSE after each alternation
    warnings: list = field(default_factory=list)


def weighted_kabsch(x: torch.Tensor, y: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Proper rotation R (det +1) minimizing sum_i w_i ||R x_i - y_i||^2.

    x, y: (..., N, 3); w: (N,) or (..., N). Point sets are centered at their
    weighted means internally.
    """
    w = w / w.sum(-1, keepdim=True) if w.ndim > 1 else w / w.sum()
    wn = w[..., None]
    mx = (wn * x).sum(-2, keepdim=True)
    my = (wn * y).sum(-2, keepdim=True)
    xc, yc = x - mx, y - my
    h = torch.einsum("...na,...nb->...ab", wn * xc, yc)
    return _kabsch_from_correlation(h)


def _kabsch_from_correlation(h: torch.Tensor) -> torch.Tensor:
    u, _, vt = torch.linalg.svd(h)
    det = torch.linalg.det(torch.matmul(vt.transpose(-1, -2), u.transpose(-1, -2)))
    d = torch.ones(h.shape[:-2] + (3,), dtype=h.dtype)
    d[..., 2] = torch.sign(det)
    v = vt.transpose(-1, -2)
    return torch.matmul(v * d[..., None, :], u.transpose(-1, -2))


def _global_part_rotations(model: BodyModel, phi: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Global rotation of every part: G_j = R(phi) @ prod(local rotations).

    phi (..., 3), theta (..., J-1, 3) -> (..., J, 3, 3)."""
    parents = model.kinematic_parents
    local = rodrigues(theta)
    root = rodrigues(phi)
    rots = [root]
    for j in range(1, model.config.joint_count):
        rots.append(rots[parents[j]] @ local[..., j - 1, :, :])
    return torch.stack(rots, dim=-3)


def _state_from_globals(model: BodyModel, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Invert _global_part_rotations: (..., J, 3, 3) -> (phi, theta)."""
    parents = model.kinematic_parents
    phi = log_map(g[..., 0, :, :])
    locals_ = []
    for j in range(1, model.config.joint_count):
        locals_.append(g[..., parents[j], :, :].transpose(-1, -2) @ g[..., j, :, :])
    theta = log_map(torch.stack(locals_, dim=-3))
    return phi, theta


def _batched_part_kabsch(
    model: BodyModel, posed: torch.Tensor, target: torch.Tensor
) -> tuple[torch.Tensor, list]:
    """Delta rotation per joint between current posed and target vertices,
    weighted by each joint's skinning column. posed/target (B, V, 3) ->
    (B, J, 3, 3)."""
    w = model.skinning_weights  # (V, J)
    col_sums = w.sum(0)
    skipped = [j for j in range(w.shape[1]) if float(col_sums[j]) < _WEIGHT_EPS]
    wn = w / torch.clamp(col_sums, min=_WEIGHT_EPS)  # column-normalized

    mx = torch.einsum("vj,bva->bja", wn, posed)
    my = torch.einsum("vj,bva->bja", wn, target)
    e_xy = torch.einsum("vj,bva,bvc->bjac", wn, posed, target)
    h = e_xy - mx[..., :, None] * my[..., None, :]
    rot = _kabsch_from_correlation(h)
    if skipped:
        eye = torch.eye(3, dtype=rot.dtype)
        for j in skipped:
            rot[:, j] = eye
    return rot, skipped


def fit_part_rotations(
    model: BodyModel, target_mesh: torch.Tensor, current_state: PersonState
) -> tuple[torch.Tensor, torch.Tensor]:
    """One rotation pass for a single mesh: returns (phi, theta).

    Joints whose skinning column is all-zero are skipped with a warning."""
    target = torch.as_tensor(target_mesh, dtype=DTYPE).unsqueeze(0)
    with torch.no_grad():
        posed = synthesize_vertices(
            model, current_state.beta, current_state.phi, current_state.tau, current_state.theta
        ).unsqueeze(0)
        delta, skipped = _batched_part_kabsch(model, posed, target)
        if skipped:
            warnings.warn(f"joints with empty skinning support skipped: {skipped}")
        g = _global_part_rotations(model, current_state.phi, current_state.theta)
        g_new = delta[0] @ g
        phi, theta = _state_from_globals(model, g_new)
    return phi, theta


@dataclass
class ShapeSolve:
    beta: torch.Tensor
    beta_unclamped: torch.Tensor
    tau: torch.Tensor
    rank_deficient: bool
    frozen_dims: tuple


def _shape_feature_directions(model: BodyModel) -> tuple[torch.Tensor, list]:
    """Rest-space feature directions: stature (the template) plus every
    morph blendshape except the height dim, which acts through the stature
    multiplier and is reconstructed after the solve."""
    morph_dims = [d for d in range(model.config.shape_dim) if d != HEIGHT_DIM]
    dirs = torch.cat(
        [model.template_vertices.unsqueeze(0), model.shape_blendshapes[morph_dims]], dim=0
    )
    return dirs, morph_dims


def _posed_feature_matrix(model: BodyModel, g: torch.Tensor) -> torch.Tensor:
    """Stack posed feature directions into A (B, 3V, F + 3); the last three
    columns are the translation identity block. Linear least squares on A
    is exact because, with rotations fixed, posed vertices are linear in
    the features and in tau."""
    dirs, _ = _shape_feature_directions(model)  # (F, V, 3)
    n_feat = dirs.shape[0]
    j_count = model.config.joint_count
    parents = model.kinematic_parents
    jd = torch.einsum("jv,fvk->fjk", model.joint_regressor, dirs)  # (F, J, 3)

    # T_j^f: chained translations per feature, using the global rotations.
    batch = g.shape[0]
    t = torch.zeros((batch, n_feat, j_count, 3), dtype=g.dtype)
    t[:, :, 0] = torch.einsum("bxy,fy->bfx", g[:, 0], jd[:, 0])
    for j in range(1, j_count):
        p = parents[j]
        bone = jd[:, j] - jd[:, p]
        t[:, :, j] = t[:, :, p] + torch.einsum("bxy,fy->bfx", g[:, p], bone)

    w = model.skinning_weights  # (V, J)
    g_flat = g.reshape(batch, j_count, 9)
    blended = torch.matmul(w, g_flat).reshape(batch, -1, 3, 3)  # (B, V, 3, 3)
    term1 = torch.einsum("bvxy,fvy->bfvx", blended, dirs)
    g_jd = torch.einsum("bjxy,fjy->bfjx", g, jd)
    term2 = torch.einsum("vj,bfjx->bfvx", w, g_jd - t)
    cols = term1 - term2  # (B, F, V, 3)

    a_feat = cols.permute(0, 2, 3, 1).reshape(batch, -1, n_feat)  # (B, 3V, F)
    eye = torch.eye(3, dtype=g.dtype)
    v_count = model.config.vertex_count
    a_tau = eye.repeat(v_count, 1).reshape(1, 3 * v_count, 3).expand(batch, -1, -1)
    return torch.cat([a_feat, a_tau], dim=-1)


def _beta_from_features(model: BodyModel, u: torch.Tensor, morph_dims: list) -> torch.Tensor:
    """Invert the feature vector (B, F) to beta (B, S), pre-clamp."""
    batch = u.shape[0]
    s = model.config.shape_dim
    beta = torch.full((batch, s), 0.5, dtype=u.dtype)
    for k, dim in enumerate(morph_dims):
        beta[:, dim] = u[:, 1 + k] + 0.5
    ages = model.stature_ages.numpy()
    vals = model.stature_values.numpy()
    age = beta[:, AGE_DIM].numpy()
    base = np.interp(np.clip(age, ages[0], ages[-1]), ages, vals)
    mult = u[:, 0].numpy() / base
    beta[:, HEIGHT_DIM] = torch.tensor((mult - 1.0) / model.height_span + 0.5, dtype=u.dtype)
    return beta


def _batched_shape_solve(
    model: BodyModel, targets: torch.Tensor, g: torch.Tensor, current_beta: torch.Tensor
) -> ShapeSolve:
    dirs, morph_dims = _shape_feature_directions(model)
    n_feat = dirs.shape[0]
    a = _posed_feature_matrix(model, g)  # (B, 3V, F+3)
    b = targets.reshape(targets.shape[0], -1, 1)

    col_norms = torch.linalg.norm(a, dim=1)  # (B, F+3)
    dead = (col_norms.max(0).values[:n_feat] < 1e-12).nonzero().reshape(-1).tolist()
    keep = [k for k in range(a.shape[-1]) if k not in dead]
    a_solve = a[:, :, keep]

    sol = torch.linalg.lstsq(a_solve, b, driver="gelsd")
    x = sol.solution[..., 0]  # (B, n_keep)
    rank_deficient = bool((sol.rank < len(keep)).any())

    u = torch.zeros((targets.shape[0], n_feat), dtype=targets.dtype)
    live_feat = [k for k in keep if k < n_feat]
    u[:, live_feat] = x[:, : len(live_feat)]
    tau = x[:, len(live_feat) :]

    beta_raw = _beta_from_features(model, u, morph_dims)
    frozen = []
    for k in dead:
        if k == 0:
            continue  # zero template cannot occur (validated positive stature)
        dim = morph_dims[k - 1]
        beta_raw[:, dim] = current_beta[..., dim]
        frozen.append(dim)
    return ShapeSolve(
        beta=beta_raw.clamp(0.0, 1.0),
        beta_unclamped=beta_raw,
        tau=tau,
        rank_deficient=rank_deficient,
        frozen_dims=tuple(frozen),
    )


def fit_shape_lls(model: BodyModel, target_mesh: torch.Tensor, current_state: PersonState) -> ShapeSolve:
    """Exact shape + translation solve for a single mesh with the pose held
    fixed. Returns the clamped beta; degenerate (all-zero) blendshape
    dimensions keep their current value and are reported in frozen_dims."""
    target = torch.as_tensor(target_mesh, dtype=DTYPE).unsqueeze(0)
    with torch.no_grad():
        g = _global_part_rotations(model, current_state.phi, current_state.theta).unsqueeze(0)
        solve = _batched_shape_solve(model, target, g, current_state.beta.unsqueeze(0))
    if solve.frozen_dims:
        warnings.warn(f"zero blendshape dims kept at current values: {solve.frozen_dims}")
    if solve.rank_deficient:
        warnings.warn("shape solve is rank deficient; minimum-norm solution returned")
    return ShapeSolve(
        beta=solve.beta[0],
        beta_unclamped=solve.beta_unclamped[0],
        tau=solve.tau[0],
        rank_deficient=solve.rank_deficient,
        frozen_dims=solve.frozen_dims,
    )


def _rmse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).sum(-1).mean(-1).sqrt()


def _tree_order_pass(
    model: BodyModel,
    targets: torch.Tensor,
    beta: torch.Tensor,
    phi: torch.Tensor,
    tau: torch.Tensor,
    theta: torch.Tensor,
):
    """Single parent-to-child refinement sweep: each joint's rotation is
    re-estimated against the target and the body re-posed before moving on,
    so children see their ancestors' corrections."""
    w = model.skinning_weights
    parents = model.kinematic_parents
    for j in range(model.config.joint_count):
        col = w[:, j]
        if float(col.sum()) < _WEIGHT_EPS:
            continue
        posed = synthesize_vertices(model, beta, phi, tau, theta)
        delta = weighted_kabsch(posed, targets, col.expand(posed.shape[0], -1))
        g = _global_part_rotations(model, phi, theta)
        if j == 0:
            phi = log_map(delta @ g[..., 0, :, :])
        else:
            p = parents[j]
            local = g[..., p, :, :].transpose(-1, -2) @ delta @ g[..., j, :, :]
            theta = theta.clone()
            theta[..., j - 1, :] = log_map(local)
    return phi, theta


def refit_batch(model: BodyModel, source_meshes, config: RefitConfig | None = None) -> RefitResult:
    """Fit parameters to a batch of meshes; vectorized across the batch."""
    config = config or RefitConfig()
    src = torch.as_tensor(np.asarray(source_meshes), dtype=DTYPE)
    if src.ndim == 2:
        src = src.unsqueeze(0)
    if config.vertex_map is not None:
        vm = torch.tensor(config.vertex_map, dtype=DTYPE)
        if src.shape[-2] != vm.shape[1]:
            raise ConfigurationError("source vertex count does not match vertex_map input dim")
        targets = torch.matmul(vm, src)
    else:
        if src.shape[-2] != model.config.vertex_count:
            raise ConfigurationError("source vertex count does not match the model topology")
        targets = src

    batch = targets.shape[0]
    cfg = model.config
    notes: list[str] = []
    with torch.no_grad():
        beta = torch.full((batch, cfg.shape_dim), 0.5, dtype=DTYPE)
        phi = torch.zeros(batch, 3, dtype=DTYPE)
        theta = torch.zeros(batch, cfg.joint_count - 1, 3, dtype=DTYPE)
        rest = synthesize_vertices(model, beta, phi, torch.zeros(batch, 3, dtype=DTYPE), theta)
        tau = targets.mean(-2) - rest.mean(-2)

        trace = [_rmse(rest + tau.unsqueeze(-2), targets)]
        for _ in range(config.iterations):
            posed = synthesize_vertices(model, beta, phi, tau, theta)
            delta, skipped = _batched_part_kabsch(model, posed, targets)
            if skipped:
                notes.append(f"skipped joints without skinning support: {skipped}")
            g_new = delta @ _global_part_rotations(model, phi, theta)
            phi, theta = _state_from_globals(model, g_new)

            solve = _batched_shape_solve(model, targets, _global_part_rotations(model, phi, theta), beta)
            beta, tau = solve.beta, solve.tau
            if solve.rank_deficient:
                notes.append("rank-deficient shape solve")
            trace.append(_rmse(synthesize_vertices(model, beta, phi, tau, theta), targets))

        if config.do_final_kinematic_pass:
            phi, theta = _tree_order_pass(model, targets, beta, phi, tau, theta)
            solve = _batched_shape_solve(model, targets, _global_part_rotations(model, phi, theta), beta)
            beta, tau = solve.beta, solve.tau

        final = _rmse(synthesize_vertices(model, beta, phi, tau, theta), targets)

    states = [
        PersonState(beta=beta[i].clone(), phi=phi[i].clone(), tau=tau[i].clone(), theta=theta[i].clone())
        for i in range(batch)
    ]
    return RefitResult(
        states=states,
        rmse=final.numpy(),
        residual_trace=torch.stack(trace).numpy(),
        warnings=sorted(set(notes)),
    )


def refit(model: BodyModel, source_mesh, config: RefitConfig | None = None) -> RefitResult:
    """Single-mesh convenience wrapper around refit_batch."""
    return refit_batch(model, source_mesh, config)
