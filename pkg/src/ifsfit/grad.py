"""Reverse-mode gradients from a rendered image back to the fractal parameters.

The backward pass has three hand-written stages, mirroring the forward pipeline:

1. ``render_backward_batch`` turns ``dL/dI`` into one 2-vector per point (pixel units);
   the fit-to-canvas map is held constant, so raw-coordinate gradients are just scaled.
2. ``adjoint_batch`` runs the recurrence backwards in time (the chaos game is a linear
   RNN with shared, index-selected weights) and scatter-adds ``dL/dA`` and ``dL/db``
   into the transform slots that were actually used.
3. ``matrix_grads_to_params`` chains ``dL/dA`` through the rotation/scale/rotation/flip
   factorisation in closed form. The flips are discrete and receive no gradient, and
   neither do the selection probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NonFiniteGradient, ShapeMismatch
from .ifs import (
    FractalSystem,
    NORMALIZE_EPS,
    NORMALIZE_MARGIN,
    NormalizationFrame,
    PointTrajectory,
    compose_matrices,
    fit_to_canvas,
    rotation,
    run_chaos_game,
)
from .render import Canvas, RenderConfig, render_backward_batch, render_batch

PARAM_KINDS = ("theta", "phi", "sigma1", "sigma2", "b")
_KIND_COLUMNS = {"theta": [0], "phi": [1], "sigma1": [2], "sigma2": [3], "b": [4, 5]}


@dataclass
class ParameterGradients:
    """Gradient w.r.t. the ``(N, 6)`` parameter array ``[theta, phi, s1, s2, b_row, b_col]``."""

    array: np.ndarray

    @property
    def per_transform(self) -> list[dict]:
        return [
            {"d_theta": r[0], "d_phi": r[1], "d_sigma1": r[2], "d_sigma2": r[3], "d_b": r[4:6].copy()}
            for r in self.array
        ]

    def norm(self) -> float:
        return float(np.linalg.norm(self.array))

    def __add__(self, other: "ParameterGradients") -> "ParameterGradients":
        return ParameterGradients(self.array + other.array)


def _pixels(img) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, Canvas) else img, dtype=float)


class ImageLoss:
    """A differentiable image-to-image loss.

    Subclasses implement ``__call__(generated, target) -> (loss, dL/dgenerated)`` for a
    single ``(H, W)`` image. ``batch`` may be overridden with a vectorised version.
    """

    def __call__(self, generated, target) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def batch(self, generated: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        target = np.broadcast_to(target, generated.shape)
        out = [self(g, t) for g, t in zip(generated, target)]
        return np.array([o[0] for o in out]), np.stack([o[1] for o in out])


class MSELoss(ImageLoss):
    """Mean over pixels of the squared difference."""

    def __call__(self, generated, target):
        gen, tgt = _pixels(generated), _pixels(target)
        if gen.shape != tgt.shape:
            raise ShapeMismatch(f"generated {gen.shape} vs target {tgt.shape}")
        diff = gen - tgt
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size

    def batch(self, generated, target):
        tgt = np.asarray(target, dtype=float)
        if tgt.shape[-2:] != generated.shape[-2:]:
            raise ShapeMismatch(f"generated {generated.shape[-2:]} vs target {tgt.shape[-2:]}")
        diff = generated - tgt
        n_pix = diff.shape[-1] * diff.shape[-2]
        return np.mean(diff * diff, axis=(-2, -1)), 2.0 * diff / n_pix


def mse_loss(generated, target) -> tuple[float, np.ndarray]:
    return MSELoss()(generated, target)


def compose_jacobians(params, flips) -> np.ndarray:
    """``(N, 4, 2, 2)`` partial derivatives of ``A`` w.r.t. ``theta, phi, sigma1, sigma2``."""
    params = np.asarray(params, dtype=float)
    n = params.shape[0]
    rot_t = rotation(params[:, 0])
    rot_p = rotation(params[:, 1])
    # d/dx R(x) = R(x + pi/2)
    drot_t = rotation(params[:, 0] + np.pi / 2)
    drot_p = rotation(params[:, 1] + np.pi / 2)
    scale = np.zeros((n, 2, 2))
    scale[:, 0, 0] = params[:, 2]
    scale[:, 1, 1] = params[:, 3]
    e1 = np.zeros((n, 2, 2))
    e1[:, 0, 0] = 1.0
    e2 = np.zeros((n, 2, 2))
    e2[:, 1, 1] = 1.0
    flip = np.zeros((n, 2, 2))
    flip[:, 0, 0] = flips[:, 0]
    flip[:, 1, 1] = flips[:, 1]
    right = rot_p @ flip
    return np.stack(
        [
            drot_t @ scale @ right,
            rot_t @ scale @ drot_p @ flip,
            rot_t @ e1 @ right,
            rot_t @ e2 @ right,
        ],
        axis=1,
    )


def matrix_grads_to_params(d_a, d_b, params, flips) -> np.ndarray:
    jac = compose_jacobians(params, np.asarray(flips, dtype=float))
    d_factors = np.einsum("nij,nkij->nk", d_a, jac)
    return np.column_stack([d_factors, d_b])


def adjoint_batch(points, z, matrices, point_grads, n_slots: int) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate point gradients through ``v_t = A[z_t] v_{t-1} + b[z_t]``.

    ``points`` and ``point_grads`` are ``(B, T + 1, 2)``; ``z`` is ``(B, T)``. The gradient on
    ``v_0`` is dropped since the start point is not learned. Returns ``(dA, db)`` summed over
    the batch with shapes ``(n_slots, 2, 2)`` and ``(n_slots, 2)``; slots never referenced in
    ``z`` stay exactly zero.
    """
    z = np.asarray(z)
    batch, t_len = z.shape
    g = np.asarray(point_grads, dtype=float)
    a = np.asarray(matrices, dtype=float)[z]
    a00 = np.ascontiguousarray(a[..., 0, 0].T)
    a01 = np.ascontiguousarray(a[..., 0, 1].T)
    a10 = np.ascontiguousarray(a[..., 1, 0].T)
    a11 = np.ascontiguousarray(a[..., 1, 1].T)
    gx = np.ascontiguousarray(g[..., 0].T)
    gy = np.ascontiguousarray(g[..., 1].T)
    lam_x = np.empty((t_len, batch))
    lam_y = np.empty((t_len, batch))
    lx, ly = gx[t_len].copy(), gy[t_len].copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(t_len, 0, -1):
            lam_x[t - 1] = lx
            lam_y[t - 1] = ly
            s = t - 1
            lx, ly = gx[s] + a00[s] * lx + a10[s] * ly, gy[s] + a01[s] * lx + a11[s] * ly
        prev = np.asarray(points, dtype=float)[:, :-1]
        px = prev[..., 0].T
        py = prev[..., 1].T
        comps = np.stack([lam_x * px, lam_x * py, lam_y * px, lam_y * py, lam_x, lam_y])
    # bincount sums in flat (t, b) order, which fixes the reduction order
    slots = z.T.ravel()
    acc = np.stack([np.bincount(slots, weights=c.ravel(), minlength=n_slots) for c in comps], axis=1)
    if not np.isfinite(acc).all():
        raise NonFiniteGradient("adjoint recurrence produced a non-finite gradient")
    return acc[:, :4].reshape(n_slots, 2, 2), acc[:, 4:6]


def backprop_trajectory(traj: PointTrajectory, point_grads, s: FractalSystem) -> ParameterGradients:
    g = np.asarray(point_grads, dtype=float)
    if g.shape != traj.points.shape:
        raise ShapeMismatch(f"point gradients {g.shape} vs trajectory {traj.points.shape}")
    d_a, d_b = adjoint_batch(traj.points[None], traj.indices.indices[None], s.matrices(), g[None], s.n)
    out = matrix_grads_to_params(d_a, d_b, s.params, s.flips)
    if not np.isfinite(out).all():
        raise NonFiniteGradient("parameter gradient is not finite")
    return ParameterGradients(out)


def frame_backward(points, frame: NormalizationFrame, d_pix, h: int, w: int,
                   margin: float = NORMALIZE_MARGIN, eps: float = NORMALIZE_EPS) -> np.ndarray:
    """Exact backward of the fit-to-canvas map, including its bounding-box dependence.

    The box is a min/max, so the derivative routes to the extremal points (first index on
    ties). Returns ``dL/dpoints`` for ``(B, P, 2)`` raw points.
    """
    points = np.asarray(points, dtype=float)
    scale = frame.scale
    d_raw = d_pix * scale[:, None, None]
    d_center = -scale[:, None] * d_pix.sum(axis=1)
    d_scale = np.einsum("bpk,bpk->b", d_pix, points - frame.center[:, None, :])
    batch = np.arange(points.shape[0])
    lo_idx = points.argmin(axis=1)
    hi_idx = points.argmax(axis=1)
    lo = points.min(axis=1)
    hi = points.max(axis=1)
    extent = hi - lo
    axis = extent.argmax(axis=1)
    d_lo = d_center / 2.0
    d_hi = d_center / 2.0
    live = extent[batch, axis] > eps
    d_extent = np.where(live, -d_scale * scale / np.maximum(extent[batch, axis], eps), 0.0)
    d_hi[batch, axis] += d_extent
    d_lo[batch, axis] -= d_extent
    for k in range(2):
        np.add.at(d_raw, (batch, lo_idx[:, k], k), d_lo[:, k])
        np.add.at(d_raw, (batch, hi_idx[:, k], k), d_hi[:, k])
    return d_raw


def params_to_matrices(params, flips, raw: bool = False) -> tuple[np.ndarray, np.ndarray]:
    params = np.asarray(params, dtype=float)
    if raw:
        return params[:, :4].reshape(-1, 2, 2), params[:, 4:6]
    return compose_matrices(params, flips), params[:, 4:6]


@dataclass
class BatchResult:
    loss: float
    losses: np.ndarray
    pixels: np.ndarray
    grad: Optional[np.ndarray]
    frame: NormalizationFrame


def evaluate_batch(params, flips, z, v0, target, cfg: RenderConfig, loss: Optional[ImageLoss] = None,
                   *, raw: bool = False, frame: Optional[NormalizationFrame] = None,
                   need_grad: bool = True, frame_grad: bool = True) -> BatchResult:
    """Forward (and optionally backward) pass for a batch of index sequences.

    The loss is averaged over the batch. ``raw=True`` treats ``params[:, :4]`` as the
    row-major entries of unconstrained matrices. Passing ``frame`` reuses a previously
    computed fit-to-canvas map instead of refitting. With ``frame_grad`` the gradient
    also flows through the bounding box that defines the frame; otherwise the frame's
    scale and offset are treated as constants.
    """
    loss = loss or MSELoss()
    z = np.atleast_2d(np.asarray(z))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    mats, trans = params_to_matrices(params, flips, raw)
    points = run_chaos_game(mats, trans, z, v0)
    if frame is None:
        pix, frame = fit_to_canvas(points, cfg.h, cfg.w)
    else:
        pix = frame.apply(points)
    pixels, pre, cache = render_batch(pix, cfg, return_cache=True)
    losses, d_img = loss.batch(pixels, target)
    batch = z.shape[0]
    grad = None
    if need_grad:
        d_pix = render_backward_batch(pix, cfg, pre, d_img / batch, cache)
        if frame_grad:
            d_raw = frame_backward(points, frame, d_pix, cfg.h, cfg.w)
        else:
            d_raw = d_pix * frame.scale[:, None, None]
        d_a, d_b = adjoint_batch(points, z, mats, d_raw, len(mats))
        if raw:
            grad = np.column_stack([d_a.reshape(-1, 4), d_b])
        else:
            grad = matrix_grads_to_params(d_a, d_b, params, flips)
        if not np.isfinite(grad).all():
            raise NonFiniteGradient("parameter gradient is not finite")
    return BatchResult(float(np.mean(losses)), losses, pixels, grad, frame)


@dataclass
class GradCheckReport:
    max_rel_error: dict
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, threshold: float = 1e-4) -> bool:
        return all(err < threshold for err in self.max_rel_error.values())

    def format_table(self, threshold: float = 1e-4) -> str:
        lines = [f"{'parameter':<10} {'max rel error':>14}  status"]
        for kind in PARAM_KINDS:
            err = self.max_rel_error[kind]
            lines.append(f"{kind:<10} {err:>14.3e}  {'ok' if err < threshold else 'FAIL'}")
        return "\n".join(lines)


def finite_difference_check(s: FractalSystem, z_batch, targets, step: float = 1e-5, *, v0s,
                            cfg: RenderConfig, loss: Optional[ImageLoss] = None,
                            frame_grad: bool = True) -> GradCheckReport:
    """Compare the analytic gradient with central differences of the batch loss.

    Index sequences and start points are held fixed. With ``frame_grad`` the frame is
    refitted at every perturbed point; without it the frame stays at its unperturbed
    value, matching the stop-gradient backward.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params, flips = s.params, s.flips
    base = evaluate_batch(params, flips, z_batch, v0s, targets, cfg, loss, frame_grad=frame_grad)
    frame = None if frame_grad else base.frame
    numeric = np.zeros_like(params)
    for idx in np.ndindex(params.shape):
        shifted = params.copy()
        shifted[idx] += step
        up = evaluate_batch(shifted, flips, z_batch, v0s, targets, cfg, loss, frame=frame,
                            need_grad=False).loss
        shifted[idx] -= 2 * step
        down = evaluate_batch(shifted, flips, z_batch, v0s, targets, cfg, loss, frame=frame,
                              need_grad=False).loss
        numeric[idx] = (up - down) / (2 * step)
    rel = np.abs(base.grad - numeric) / np.maximum(np.abs(numeric), 1e-8)
    report = {kind: float(rel[:, cols].max()) for kind, cols in _KIND_COLUMNS.items()}
    return GradCheckReport(report, base.grad, numeric)
