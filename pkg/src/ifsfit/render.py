"""Soft (RBF) rendering of point sets and its backward pass, plus the hard rasterizer.

Pixel ``(h, w)`` sits on the integer lattice point ``[h, w]`` and a point ``v`` deposits
``exp(-|[h, w] - v|^2 / tau)`` on it. The Gaussian factorises over the two axes, so the
exact (untruncated) render of a point set is the product ``Gx^T Gy`` of two small kernel
tables; this is what keeps the full 32x32 canvas cheap without any truncation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NonFinitePoint, ShapeMismatch

DEFAULT_TRUNCATION = 6.0
# Kernel factors below exp(-300) are flushed to zero: it keeps every product of two
# factors out of the (very slow) subnormal range and moves no pixel by more than ~1e-130.
KERNEL_EXP_FLOOR = -300.0


@dataclass(frozen=True)
class RenderConfig:
    h: int = 32
    w: int = 32
    tau: float = 1.0
    clamp: bool = True
    truncation_radius: Optional[float] = None

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError("canvas dimensions must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        r = self.truncation_radius
        if r is not None and r < 3.0 * math.sqrt(self.tau):
            raise ValueError("truncation_radius must be at least 3*sqrt(tau)")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.h, self.w)


@dataclass
class Canvas:
    pixels: np.ndarray
    pre_clamp: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.pixels.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.pixels, dtype=dtype)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return pts.reshape(*pts.shape[:-2], 0, 2) if pts.ndim >= 2 else np.zeros((0, 2))
    if not np.isfinite(pts).all():
        raise NonFinitePoint("cannot render a non-finite point")
    return pts


def _axis_tables(pts, cfg: RenderConfig):
    """Per-point kernel factors along rows and columns, plus the signed offsets."""
    dr = np.arange(cfg.h, dtype=float) - pts[..., 0:1]  # (..., P, H)
    dc = np.arange(cfg.w, dtype=float) - pts[..., 1:2]  # (..., P, W)
    return _gauss(dr, cfg.tau), _gauss(dc, cfg.tau), dr, dc


def _gauss(d, tau):
    out = np.square(d)
    out *= -1.0 / tau
    out[out < KERNEL_EXP_FLOOR] = -np.inf
    return np.exp(out, out=out)


@dataclass
class RenderCache:
    """Forward intermediates reused by the backward pass of an untruncated render."""

    gx: np.ndarray
    gy: np.ndarray
    dr: np.ndarray
    dc: np.ndarray


def _window(pts, cfg: RenderConfig):
    """Flat pixel indices, weights and offsets of every (point, pixel) pair inside the cutoff."""
    r = cfg.truncation_radius
    k = int(math.floor(r)) + 1
    offs = np.arange(-k, k + 1)
    base = np.rint(pts).astype(np.int64)  # (..., P, 2)
    rows = base[..., 0, None, None] + offs[:, None]  # (..., P, K, 1)
    cols = base[..., 1, None, None] + offs[None, :]  # (..., P, 1, K)
    dr = rows - pts[..., 0, None, None]
    dc = cols - pts[..., 1, None, None]
    dist2 = dr * dr + dc * dc
    keep = (dist2 <= r * r) & (rows >= 0) & (rows < cfg.h) & (cols >= 0) & (cols < cfg.w)
    weight = np.where(keep, np.exp(-dist2 / cfg.tau), 0.0)
    flat = np.clip(rows, 0, cfg.h - 1) * cfg.w + np.clip(cols, 0, cfg.w - 1)
    return flat, weight, dr, dc


def render_batch(points, cfg: RenderConfig, *, return_cache: bool = False):
    """Render ``(B, P, 2)`` point sets. Returns ``(pixels, pre_clamp)``, each ``(B, H, W)``.

    With ``return_cache`` a third element holds the kernel tables for the backward pass.
    """
    pts = _as_points(points)
    batch = pts.shape[0]
    cache = None
    if cfg.truncation_radius is None:
        gx, gy, dr, dc = _axis_tables(pts, cfg)
        pre = np.matmul(np.swapaxes(gx, -1, -2), gy)
        cache = RenderCache(gx, gy, dr, dc)
    else:
        flat, weight, _, _ = _window(pts, cfg)
        pre = np.zeros((batch, cfg.h * cfg.w))
        for i in range(batch):
            pre[i] = np.bincount(flat[i].ravel(), weights=weight[i].ravel(), minlength=cfg.h * cfg.w)
        pre = pre.reshape(batch, cfg.h, cfg.w)
    pixels = np.minimum(pre, 1.0) if cfg.clamp else pre
    if return_cache:
        return pixels, pre, cache
    return pixels, pre


def render(points, cfg: RenderConfig) -> Canvas:
    pts = _as_points(points).reshape(-1, 2)
    pixels, pre = render_batch(pts[None], cfg)
    return Canvas(pixels=pixels[0], pre_clamp=pre[0] if cfg.clamp else None)


def render_backward_batch(points, cfg: RenderConfig, pre_clamp, grad_image,
                          cache: Optional[RenderCache] = None) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. ``(B, P, 2)`` points given ``dL/dI`` of shape ``(B, H, W)``.

    With clamping on, pixels whose unclamped sum exceeds 1 pass no gradient; a sum of
    exactly 1 is treated as unclamped.
    """
    pts = _as_points(points)
    g = np.asarray(grad_image, dtype=float)
    if g.shape[-2:] != (cfg.h, cfg.w):
        raise ShapeMismatch(f"gradient image {g.shape[-2:]} does not match canvas {(cfg.h, cfg.w)}")
    if cfg.clamp:
        g = np.where(np.asarray(pre_clamp) > 1.0, 0.0, g)
    g = np.broadcast_to(g, (pts.shape[0], cfg.h, cfg.w))
    coef = 2.0 / cfg.tau
    if cfg.truncation_radius is None:
        if cache is None:
            cache = RenderCache(*_axis_tables(pts, cfg))
        gx, gy, dr, dc = cache.gx, cache.gy, cache.dr, cache.dc
        # u[t, h] = sum_w g[h, w] gy[t, w];  v[t, w] = sum_h g[h, w] gx[t, h]
        u = np.matmul(gy, np.swapaxes(g, -1, -2))
        v = np.matmul(gx, g)
        out = np.empty(pts.shape)
        out[..., 0] = np.einsum("...ph,...ph,...ph->...p", gx, dr, u)
        out[..., 1] = np.einsum("...pw,...pw,...pw->...p", gy, dc, v)
        out *= coef
        return out
    flat, weight, dr, dc = _window(pts, cfg)
    gflat = g.reshape(g.shape[0], 1, -1)
    gv = np.take_along_axis(gflat, flat.reshape(flat.shape[0], 1, -1), axis=-1).reshape(flat.shape)
    term = coef * gv * weight
    return np.stack([np.sum(term * dr, axis=(-2, -1)), np.sum(term * dc, axis=(-2, -1))], axis=-1)


def render_backward(points, cfg: RenderConfig, canvas: Canvas, grad_image) -> np.ndarray:
    pts = _as_points(points).reshape(-1, 2)
    g = np.asarray(grad_image, dtype=float)
    if g.shape != (cfg.h, cfg.w):
        raise ShapeMismatch(f"gradient image {g.shape} does not match canvas {(cfg.h, cfg.w)}")
    pre = canvas.pre_clamp if canvas.pre_clamp is not None else canvas.pixels
    return render_backward_batch(pts[None], cfg, np.asarray(pre)[None], g[None])[0]


def rasterize_hard(points, h: int, w: int) -> Canvas:
    """Round each point to its nearest pixel and light it. Out-of-canvas points are dropped."""
    out = np.zeros((h, w))
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts):
        pts = pts[np.isfinite(pts).all(axis=1)]
        idx = np.rint(pts).astype(np.int64)
        inside = (idx[:, 0] >= 0) & (idx[:, 0] < h) & (idx[:, 1] >= 0) & (idx[:, 1] < w)
        idx = idx[inside]
        out[idx[:, 0], idx[:, 1]] = 1.0
    return Canvas(pixels=out)
