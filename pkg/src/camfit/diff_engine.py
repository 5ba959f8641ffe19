"""Gradients of scene objectives, with built-in finite-difference checking.

Reverse-mode differentiation supplies the gradients; central finite
differences are the independent oracle. Objectives map SceneParams to a
scalar (or to a vector of loss components, checked jointly). Objectives
exposing ``supports_batch = True`` accept leading batch dimensions, letting
the checker evaluate every +-h perturbation in one forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .body_model import PersonState, SceneParams
from .errors import EvaluationError


def _as_params(states) -> SceneParams:
    if isinstance(states, SceneParams):
        return states
    if isinstance(states, PersonState):
        return SceneParams.from_states([states])
    return SceneParams.from_states(list(states))


@dataclass
class GradientReport:
    beta: np.ndarray
    phi: np.ndarray
    tau: np.ndarray
    theta: np.ndarray
    eval_count: int
    max_rel_fd_error: float | None = None

    def block(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "phi": self.phi.tolist(),
            "tau": self.tau.tolist(),
            "theta": self.theta.tolist(),
            "eval_count": self.eval_count,
            "max_rel_fd_error": self.max_rel_fd_error,
        }


@dataclass
class FDCheckResult:
    passed: bool
    max_rel_error: float
    worst_block: str
    worst_index: int  # flat index within the block
    eval_count: int


def _leaf_params(params: SceneParams) -> SceneParams:
    return params.map(lambda t: t.detach().clone().requires_grad_(True))


def gradient(objective, states) -> GradientReport:
    """Reverse-mode gradient of a scalar objective w.r.t. every parameter."""
    params = _as_params(states)
    leaf = _leaf_params(params)
    value = objective(leaf)
    if value.numel() != 1:
        raise EvaluationError("gradient() expects a scalar objective")
    if not bool(torch.isfinite(value).all()):
        raise EvaluationError("objective is non-finite at the given states")
    grads = torch.autograd.grad(
        value, [leaf.beta, leaf.phi, leaf.tau, leaf.theta], allow_unused=True
    )
    out = {}
    for name, g, ref in zip(SceneParams.BLOCKS, grads, (params.beta, params.phi, params.tau, params.theta)):
        out[name] = (g if g is not None else torch.zeros_like(ref)).detach().numpy().copy()
    return GradientReport(eval_count=1, **out)


def _term_gradients(objective, params: SceneParams) -> tuple[torch.Tensor, int]:
    """Stacked gradients (T, C) of each objective component, flattened over
    all parameter coordinates."""
    leaf = _leaf_params(params)
    value = objective(leaf)
    flat_terms = value.reshape(-1)
    rows = []
    for t in range(flat_terms.numel()):
        grads = torch.autograd.grad(
            flat_terms[t],
            [leaf.beta, leaf.phi, leaf.tau, leaf.theta],
            retain_graph=t + 1 < flat_terms.numel(),
            allow_unused=True,
        )
        pieces = [
            (g if g is not None else torch.zeros_like(ref)).reshape(-1)
            for g, ref in zip(grads, (leaf.beta, leaf.phi, leaf.tau, leaf.theta))
        ]
        rows.append(torch.cat(pieces))
    return torch.stack(rows), flat_terms.numel()


def _block_layout(params: SceneParams):
    layout = []
    offset = 0
    for name in SceneParams.BLOCKS:
        n = getattr(params, name).numel()
        layout.append((name, offset, n))
        offset += n
    return layout, offset


def _fd_values_batched(objective, params: SceneParams, h: float) -> torch.Tensor:
    layout, total = _block_layout(params)
    batched = {}
    for name, offset, n in layout:
        base = getattr(params, name).detach()
        big = base.unsqueeze(0).repeat(2 * total, *([1] * base.ndim)).clone()
        flat = big.reshape(2 * total, -1)
        rows = torch.arange(n)
        flat[2 * (offset + rows), rows] += h
        flat[2 * (offset + rows) + 1, rows] -= h
        batched[name] = big
    with torch.no_grad():
        vals = objective(SceneParams(**batched))
    return vals  # (2C,) or (2C, T)


def _fd_values_loop(objective, params: SceneParams, h: float) -> torch.Tensor:
    layout, total = _block_layout(params)
    rows = []
    with torch.no_grad():
        for name, offset, n in layout:
            base = getattr(params, name).detach()
            for k in range(n):
                for sign in (h, -h):
                    pert = base.clone().reshape(-1)
                    pert[k] += sign
                    blocks = params.blocks()
                    blocks = {m: v.detach() for m, v in blocks.items()}
                    blocks[name] = pert.reshape(base.shape)
                    rows.append(objective(SceneParams(**blocks)).reshape(-1))
    return torch.stack(rows)


def fd_check(
    objective,
    states,
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
) -> FDCheckResult:
    """Compare reverse-mode gradients against central finite differences.

    Relative error per coordinate (and per objective component) uses the
    larger of the two gradients as denominator, floored at ``abs_floor``.
    """
    if h <= 0:
        raise EvaluationError("finite-difference step must be positive")
    params = _as_params(states)
    analytic, n_terms = _term_gradients(objective, params)  # (T, C)

    if getattr(objective, "supports_batch", False):
        vals = _fd_values_batched(objective, params, h)
    else:
        vals = _fd_values_loop(objective, params, h)
    vals = vals.reshape(vals.shape[0], -1)  # (2C, T)
    if vals.shape[1] != n_terms:
        raise EvaluationError("objective output arity changed between evaluations")
    fd = (vals[0::2] - vals[1::2]).T / (2.0 * h)  # (T, C)

    # Discrepancies below the absolute floor never count as relative
    # failures (they are finite-difference noise at near-zero gradients).
    disc = (fd - analytic).abs()
    denom = torch.clamp(torch.maximum(analytic.abs(), fd.abs()), min=1e-300)
    rel = torch.where(disc <= abs_floor, torch.zeros_like(disc), disc / denom)
    max_rel = float(rel.max())
    worst_flat = int(rel.max(0).values.argmax())
    layout, total = _block_layout(params)
    worst_block, worst_index = "", 0
    for name, offset, n in layout:
        if offset <= worst_flat < offset + n:
            worst_block, worst_index = name, worst_flat - offset
            break
    return FDCheckResult(
        passed=max_rel <= rel_tol,
        max_rel_error=max_rel,
        worst_block=worst_block,
        worst_index=worst_index,
        eval_count=2 * total,
    )
